//! Desk-scale experiment drivers shared by the CLI and the acceptance suite.

use std::fmt::Write as _;

use crate::config::ExperimentConfig;
use crate::error::{DecscError, Result};
use crate::layers::ModelParams;
use crate::metrics::psnr_whole;
use crate::tensor::HsiCube;
use crate::train::{evaluate_psnr, train, TrainLog};

pub type Pairs = [(HsiCube, HsiCube)];

/// Mean PSNR of the noisy inputs against their references.
pub fn noisy_psnr(pairs: &Pairs) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DecscError::invalid("empty evaluation set"));
    }
    let mut total = 0.0;
    for (y, x) in pairs {
        total += psnr_whole(y, x)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub params: ModelParams,
    pub log: TrainLog,
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
}

/// Trains on `train_set` with `cfg` and scores the held-out pairs.
pub fn toy_run(train_set: &Pairs, test_set: &Pairs, cfg: &ExperimentConfig) -> Result<ToyRun> {
    let bands = train_set
        .first()
        .map(|(_, x)| x.bands())
        .ok_or_else(|| DecscError::invalid("training set is empty"))?;
    let mut model = cfg.model.clone();
    model.bands = bands;
    let out = train(train_set, &[], &model, &cfg.train)?;
    let denoised_psnr = evaluate_psnr(&out.params, test_set, &cfg.train.solver)?;
    Ok(ToyRun {
        params: out.params,
        log: out.log,
        noisy_psnr: noisy_psnr(test_set)?,
        denoised_psnr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub atoms2d: usize,
    pub unroll: usize,
    pub train_steps: usize,
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
}

pub const ABLATION_HEADER: &str = "atoms2d,unroll,train_steps,noisy_psnr,denoised_psnr";

/// Trains one model per `(atoms, L)` combination from the same seed.
pub fn ablation_sweep(
    train_set: &Pairs,
    test_set: &Pairs,
    base: &ExperimentConfig,
    atoms: &[usize],
    unrolls: &[usize],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &m in atoms {
        for &l in unrolls {
            let mut cfg = base.clone();
            cfg.model.atoms2d = m;
            cfg.train.unroll = l;
            let run = toy_run(train_set, test_set, &cfg)?;
            rows.push(AblationRow {
                atoms2d: m,
                unroll: l,
                train_steps: run.log.steps.len(),
                noisy_psnr: run.noisy_psnr,
                denoised_psnr: run.denoised_psnr,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?}",
            r.atoms2d, r.unroll, r.train_steps, r.noisy_psnr, r.denoised_psnr
        );
    }
    out
}
