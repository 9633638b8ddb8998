//! Adam training of the equilibrium model with phantom gradients.
//!
//! Each sample: equilibrium solve without gradients, `L` recorded layer
//! applications from the detached fixed point, reconstruction, and an exact
//! backward pass through that unroll. Per-sample work may run in parallel; the
//! batch gradient is summed in sample order so results do not depend on the
//! worker count.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DecscError, Result};
use crate::layers::{reconstruct, ModelConfig, ModelParams};
use crate::metrics::psnr_whole;
use crate::par;
use crate::phantom::{phantom_backward, phantom_backward_seeded, unroll_forward, GradSet};
use crate::pipeline::{denoise, solve_equilibrium};
use crate::solver::SolverConfig;
use crate::tensor::{Flat, HsiCube};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Halve the learning rate every this many epochs.
    pub lr_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Phantom unroll length `L`.
    pub unroll: usize,
    pub seed: u64,
    /// Square training crop side; 0 trains on whole cubes.
    pub crop: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub clip_norm: Option<f64>,
    /// Validation every this many epochs (and always after the last one).
    pub val_every: usize,
    /// Weight `μ` of the fixed-point penalty `μ‖α_L − α_{L−1}‖²` added to the
    /// training objective; 0 disables it.
    pub fp_weight: f64,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            epochs: 30,
            lr_period: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            unroll: 5,
            seed: 0,
            crop: 32,
            max_steps: 0,
            clip_norm: None,
            val_every: 1,
            fp_weight: 0.0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps, 1.0 - self.beta1, 1.0 - self.beta2];
        if !positive.iter().all(|v| *v > 0.0) || self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(DecscError::invalid("lr, eps must be positive and betas in [0, 1)"));
        }
        if self.batch == 0 || self.epochs == 0 || self.lr_period == 0 || self.unroll == 0 || self.val_every == 0 {
            return Err(DecscError::invalid("batch, epochs, lr_period, unroll and val_every must be at least 1"));
        }
        if !(self.fp_weight >= 0.0) {
            return Err(DecscError::invalid("fp_weight must be nonnegative"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(DecscError::invalid("clip_norm must be positive"));
        }
        self.solver.validate()
    }

    /// Desk-scale settings used by the toy experiments.
    pub fn toy() -> Self {
        Self {
            lr: 3e-4,
            batch: 2,
            epochs: 50,
            lr_period: 50,
            crop: 16,
            max_steps: 200,
            val_every: 10,
            ..Self::default()
        }
    }

    /// `lr₀ · 0.5^⌊epoch / period⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_period) as i32)
    }
}

/// Adam moments per parameter leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(p: &ModelParams) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update at rate `lr`. A non-finite gradient leaves
/// parameters and state untouched and returns `false`.
pub fn adam_step(p: &mut ModelParams, g: &GradSet, st: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<bool> {
    if g.0.num_scalars() != p.num_scalars() || st.m.num_scalars() != p.num_scalars() {
        return Err(DecscError::shape("gradient or Adam state does not match parameters"));
    }
    if !g.is_finite() {
        return Ok(false);
    }
    st.step += 1;
    let t = st.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let leaves = p.leaves_mut().into_iter().zip(g.0.leaves());
    let moments = st.m.leaves_mut().into_iter().zip(st.v.leaves_mut());
    for (((_, pv), (_, gv)), ((_, mv), (_, vv))) in leaves.zip(moments) {
        for i in 0..pv.len() {
            mv[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * gv[i];
            vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * gv[i] * gv[i];
            let mhat = mv[i] / c1;
            let vhat = vv[i] / c2;
            pv[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(true)
}

/// `‖X̂ − X‖²_F`.
pub fn loss(xhat: &HsiCube, x: &HsiCube) -> Result<f64> {
    if !xhat.same_dims(x) {
        return Err(DecscError::shape("loss operands differ in shape"));
    }
    Ok(xhat.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `(1/N) Σ ‖X̂_i − X_i‖²_F`.
pub fn batch_loss(pairs: &[(HsiCube, HsiCube)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DecscError::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += loss(a, b)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub grad: GradSet,
    pub solver_iters: usize,
}

/// Loss and phantom gradient for one `(Y, X)` pair.
pub fn sample_grad(p: &ModelParams, y: &HsiCube, x: &HsiCube, cfg: &TrainConfig) -> Result<SampleGrad> {
    if !y.same_dims(x) {
        return Err(DecscError::shape("noisy and clean cubes differ in shape"));
    }
    let (alpha, trace) = solve_equilibrium(p, y, &cfg.solver, None)?;
    let (out, tape) = unroll_forward(&alpha, y, cfg.unroll, p)?;
    let xhat = reconstruct(&out, p)?;
    let l = loss(&xhat, x)?;
    let dx = HsiCube::from_vec(
        x.height(),
        x.width(),
        x.bands(),
        xhat.data().iter().zip(x.data()).map(|(a, b)| 2.0 * (a - b)).collect(),
    )?;
    let grad = if cfg.fp_weight > 0.0 {
        let prev = tape.last_input().ok_or_else(|| DecscError::invalid("empty tape"))?;
        let r: Vec<f64> = out
            .to_flat()
            .iter()
            .zip(prev.to_flat())
            .map(|(a, b)| 2.0 * cfg.fp_weight * (a - b))
            .collect();
        let mut extra = vec![(cfg.unroll, out.with_flat(&r)?)];
        if cfg.unroll > 1 {
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            extra.push((cfg.unroll - 1, out.with_flat(&neg)?));
        }
        phantom_backward_seeded(&tape, &dx, p, &extra)?
    } else {
        phantom_backward(&tape, &dx, p)?
    };
    Ok(SampleGrad {
        loss: l,
        grad,
        solver_iters: trace.iterations(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub mean_solver_iters: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
    pub skipped: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub const STEP_HEADER: &'static str = "epoch,step,loss,lr,mean_solver_iters";
    pub const EPOCH_HEADER: &'static str = "epoch,mean_loss,val_psnr,skipped_samples,total_samples";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::STEP_HEADER);
        for r in &self.steps {
            let _ = writeln!(out, "{},{},{:?},{:?},{:?}", r.epoch, r.step, r.loss, r.lr, r.mean_solver_iters);
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = format!("{}\n", Self::EPOCH_HEADER);
        for r in &self.epochs {
            let val = r.val_psnr.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:?},{},{},{}", r.epoch, r.mean_loss, val, r.skipped, r.samples);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub log: TrainLog,
}

fn check_dataset(data: &[(HsiCube, HsiCube)], bands: usize) -> Result<()> {
    for (y, x) in data {
        if !y.same_dims(x) || x.bands() != bands {
            return Err(DecscError::shape(format!(
                "dataset pair {:?} / {:?} inconsistent with {bands} bands",
                y.dims(),
                x.dims()
            )));
        }
    }
    Ok(())
}

/// Mean PSNR of the denoised `Y` against `X` over `pairs`.
pub fn evaluate_psnr(p: &ModelParams, pairs: &[(HsiCube, HsiCube)], solver: &SolverConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DecscError::invalid("empty evaluation set"));
    }
    let psnrs = par::map_range(pairs.len(), |i| -> Result<f64> {
        let (y, x) = &pairs[i];
        let (xhat, _) = denoise(p, y, solver, None)?;
        psnr_whole(&xhat, x)
    });
    let mut total = 0.0;
    for v in psnrs {
        total += v?;
    }
    Ok(total / pairs.len() as f64)
}

/// Initializes from `model` with the run seed and trains.
pub fn train(
    data: &[(HsiCube, HsiCube)],
    val: &[(HsiCube, HsiCube)],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let p = ModelParams::init(model, &mut init_rng)?;
    let adam = AdamState::new(&p);
    train_from(p, adam, data, val, cfg)
}

fn is_solver_failure(e: &DecscError) -> bool {
    matches!(e, DecscError::Diverged { .. } | DecscError::NonFinite { .. })
}

/// Continues training from existing parameters and optimizer state.
pub fn train_from(
    mut p: ModelParams,
    mut adam: AdamState,
    data: &[(HsiCube, HsiCube)],
    val: &[(HsiCube, HsiCube)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DecscError::invalid("training set is empty"));
    }
    check_dataset(data, p.bands())?;
    check_dataset(val, p.bands())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut skipped, mut seen) = (0usize, 0usize);
        let mut batch_losses = Vec::new();
        let mut stop = false;
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (y, x) = &data[i];
                batch.push(if cfg.crop == 0 || (cfg.crop >= x.height() && cfg.crop >= x.width()) {
                    (y.clone(), x.clone())
                } else {
                    let ch = cfg.crop.min(x.height());
                    let cw = cfg.crop.min(x.width());
                    let r = rng.gen_range(0..=x.height() - ch);
                    let c = rng.gen_range(0..=x.width() - cw);
                    (y.crop(r, c, ch, cw)?, x.crop(r, c, ch, cw)?)
                });
            }
            let results = par::map_range(batch.len(), |i| sample_grad(&p, &batch[i].0, &batch[i].1, cfg));
            seen += results.len();
            let mut grad = GradSet::zeros(&p);
            let (mut total, mut iters, mut valid) = (0.0, 0usize, 0usize);
            for (j, r) in results.into_iter().enumerate() {
                match r {
                    Ok(s) => {
                        grad.add_assign(&s.grad);
                        total += s.loss;
                        iters += s.solver_iters;
                        valid += 1;
                    }
                    Err(e) if is_solver_failure(&e) => {
                        skipped += 1;
                        log.warnings.push(format!("epoch {epoch} step {step}: skipped sample {}: {e}", chunk[j]));
                    }
                    Err(e) => return Err(e),
                }
            }
            if valid > 0 {
                let n = valid as f64;
                grad.scale(1.0 / n);
                if let Some(c) = cfg.clip_norm {
                    let g = grad.norm();
                    if g > c {
                        grad.scale(c / g);
                    }
                }
                if !adam_step(&mut p, &grad, &mut adam, lr, cfg)? {
                    log.warnings.push(format!("epoch {epoch} step {step}: non-finite gradient, update skipped"));
                }
                let row = StepRow {
                    epoch,
                    step,
                    loss: total / n,
                    lr,
                    mean_solver_iters: iters as f64 / n,
                };
                batch_losses.push(row.loss);
                log.steps.push(row);
                step += 1;
            }
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                stop = true;
                break;
            }
        }
        if 2 * skipped > seen {
            return Err(DecscError::TrainingAborted(format!(
                "epoch {epoch}: {skipped} of {seen} samples skipped"
            )));
        }
        let last = stop || epoch + 1 == cfg.epochs;
        let val_psnr = if !val.is_empty() && (last || (epoch + 1) % cfg.val_every == 0) {
            Some(evaluate_psnr(&p, val, &cfg.solver)?)
        } else {
            None
        };
        let mean_loss = if batch_losses.is_empty() {
            f64::NAN
        } else {
            batch_losses.iter().sum::<f64>() / batch_losses.len() as f64
        };
        log.epochs.push(EpochRow {
            epoch,
            mean_loss,
            val_psnr,
            skipped,
            samples: seen,
        });
        if stop {
            break 'epochs;
        }
    }
    Ok(TrainOutcome { params: p, adam, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ModelConfig;

    fn scalar_cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            ..TrainConfig::default()
        }
    }

    fn tiny() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::tiny(3, 4, 2);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (cfg, p)
    }

    fn cube(h: usize, w: usize, b: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::from_vec(h, w, b, (0..h * w * b).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap()
    }

    #[test]
    fn loss_values() {
        let x = cube(2, 2, 2, 1);
        assert_eq!(loss(&x, &x).unwrap(), 0.0);
        let y = HsiCube::from_vec(2, 2, 2, x.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((loss(&y, &x).unwrap() - 0.08).abs() < 1e-15);
        let a = cube(3, 4, 2, 2);
        let b = cube(3, 4, 2, 3);
        let mut naive = 0.0;
        for band in 0..2 {
            for r in 0..3 {
                for c in 0..4 {
                    naive += (a.get(r, c, band) - b.get(r, c, band)).powi(2);
                }
            }
        }
        assert!((loss(&a, &b).unwrap() - naive).abs() <= 1e-14);
        assert!(loss(&a, &cube(3, 3, 2, 0)).is_err());
        let bl = batch_loss(&[(a.clone(), b.clone()), (x.clone(), x.clone())]).unwrap();
        assert!((bl - naive / 2.0).abs() <= 1e-14);
    }

    #[test]
    fn lr_schedule_halves_per_period() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(9), 1e-4);
        assert_eq!(c.lr_at(10), 5e-5);
        assert_eq!(c.lr_at(25), 2.5e-5);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let (_, mut p) = tiny();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = GradSet::zeros(&p);
        assert!(adam_step(&mut p, &g, &mut st, 1e-3, &scalar_cfg(1e-3)).unwrap());
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let (_, mut p) = tiny();
        let before = p.to_flat();
        let mut st = AdamState::new(&p);
        let mut g = GradSet::zeros(&p);
        for (_, v) in g.0.leaves_mut() {
            v.iter_mut().for_each(|x| *x = 1.0);
        }
        let cfg = scalar_cfg(1e-3);
        adam_step(&mut p, &g, &mut st, cfg.lr, &cfg).unwrap();
        // t = 1: m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε)
        let expect = cfg.lr / (1.0 + cfg.eps);
        for (a, b) in before.iter().zip(p.to_flat()) {
            assert!(((a - b) - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn adam_skips_non_finite() {
        let (_, mut p) = tiny();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let mut g = GradSet::zeros(&p);
        g.0.theta1_raw = f64::NAN;
        assert!(!adam_step(&mut p, &g, &mut st, 1e-3, &scalar_cfg(1e-3)).unwrap());
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_scalar_quadratic_matches_reference_rule() {
        let cfg = scalar_cfg(0.1);
        let (_, mut p) = tiny();
        let n = p.num_scalars();
        p.set_flat(&vec![1.0; n]).unwrap();
        let mut st = AdamState::new(&p);
        let (mut q, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let mut g = GradSet::zeros(&p);
            g.0.set_flat(&p.to_flat()).unwrap();
            adam_step(&mut p, &g, &mut st, cfg.lr, &cfg).unwrap();
            m = 0.9 * m + 0.1 * q;
            v = 0.999 * v + 0.001 * q * q;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(q.abs() <= 0.01, "{q}");
        assert!(p.to_flat().iter().all(|&x| (x - q).abs() <= 1e-12));
    }

    #[test]
    fn invalid_train_configs() {
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { lr_period: 0, ..Default::default() },
            TrainConfig { batch: 0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { clip_norm: Some(-1.0), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch: 2,
            epochs: 2,
            crop: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn clean_sample_loss_does_not_increase() {
        let (mcfg, _) = tiny();
        let x = cube(6, 6, 3, 9);
        let data = vec![(x.clone(), x.clone())];
        let cfg = TrainConfig { epochs: 1, ..small_cfg() };
        let p0 = ModelParams::init(&mcfg, &mut {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(1);
            r
        })
        .unwrap();
        let before = sample_grad(&p0, &x, &x, &cfg).unwrap().loss;
        let out = train(&data, &[], &mcfg, &cfg).unwrap();
        let after = sample_grad(&out.params, &x, &x, &cfg).unwrap().loss;
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn training_is_deterministic_and_leaves_data_untouched() {
        let (mcfg, _) = tiny();
        let data: Vec<_> = (0..3).map(|i| (cube(8, 8, 3, 10 + i), cube(8, 8, 3, 20 + i))).collect();
        let copy = data.clone();
        let cfg = TrainConfig { crop: 6, ..small_cfg() };
        let a = train(&data, &data[..1], &mcfg, &cfg).unwrap();
        let b = train(&data, &data[..1], &mcfg, &cfg).unwrap();
        assert_eq!(data, copy);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.log.steps.len(), 4);
        assert_eq!(a.adam.step, 4);
        for e in &a.log.epochs {
            let rows: Vec<f64> = a.log.steps.iter().filter(|r| r.epoch == e.epoch).map(|r| r.loss).collect();
            let mean = rows.iter().sum::<f64>() / rows.len() as f64;
            assert!((mean - e.mean_loss).abs() <= 1e-12);
            assert!(e.val_psnr.is_some());
        }
        assert!(a.log.to_csv().starts_with("epoch,step,loss,lr,mean_solver_iters\n"));
    }

    #[test]
    fn max_steps_stops_early() {
        let (mcfg, _) = tiny();
        let data: Vec<_> = (0..4).map(|i| (cube(6, 6, 3, i), cube(6, 6, 3, 30 + i))).collect();
        let cfg = TrainConfig { max_steps: 3, epochs: 10, ..small_cfg() };
        let out = train(&data, &[], &mcfg, &cfg).unwrap();
        assert_eq!(out.log.steps.len(), 3);
        assert_eq!(out.log.epochs.len(), 2);
    }

    #[test]
    fn divergent_samples_abort_the_epoch() {
        let (_, mut p) = tiny();
        p.scale_dictionaries(4.0);
        let data: Vec<_> = (0..2).map(|i| (cube(6, 6, 3, i), cube(6, 6, 3, 40 + i))).collect();
        let mut cfg = small_cfg();
        cfg.solver.tol = 1e-12;
        cfg.solver.divergence_factor = 1e3;
        let adam = AdamState::new(&p);
        match train_from(p, adam, &data, &[], &cfg) {
            Err(DecscError::TrainingAborted(msg)) => assert!(msg.contains("2 of 2")),
            Err(e) => panic!("expected abort, got {e}"),
            Ok(_) => panic!("expected abort"),
        }
    }

    #[test]
    fn shape_checks() {
        let (mcfg, _) = tiny();
        assert!(train(&[], &[], &mcfg, &small_cfg()).is_err());
        let bad = vec![(cube(6, 6, 4, 0), cube(6, 6, 4, 1))];
        assert!(train(&bad, &[], &mcfg, &small_cfg()).is_err());
    }
}
