//! Inference: equilibrium solve from the zero state followed by reconstruction.

use crate::error::Result;
use crate::layers::{layer_step, reconstruct, DeqState, ModelParams};
use crate::metrics::psnr_whole;
use crate::solver::{solve, Monitor, SolveTrace, SolverConfig};
use crate::tensor::HsiCube;

/// Solves `α = f(α; Y)` from zero. With a reference cube, the trace records
/// the PSNR of `reconstruct(α_t)` at every iterate.
pub fn solve_equilibrium(
    p: &ModelParams,
    y: &HsiCube,
    cfg: &SolverConfig,
    reference: Option<&HsiCube>,
) -> Result<(DeqState, SolveTrace)> {
    let template = DeqState::zeros(p, y.height(), y.width());
    let step = |a: &[f64]| -> Result<Vec<f64>> {
        let s = template.with_flat(a)?;
        Ok(layer_step(&s, y, p)?.to_flat())
    };
    let alpha0 = template.to_flat();
    let (alpha, trace) = match reference {
        Some(x) => {
            let mut monitor = |a: &[f64]| -> Result<Option<f64>> {
                let xhat = reconstruct(&template.with_flat(a)?, p)?;
                Ok(Some(psnr_whole(&xhat, x)?))
            };
            solve(step, &alpha0, cfg, Some(&mut monitor as &mut Monitor<'_>))?
        }
        None => solve(step, &alpha0, cfg, None)?,
    };
    Ok((template.with_flat(&alpha)?, trace))
}

pub fn denoise(
    p: &ModelParams,
    y: &HsiCube,
    cfg: &SolverConfig,
    reference: Option<&HsiCube>,
) -> Result<(HsiCube, SolveTrace)> {
    let (state, trace) = solve_equilibrium(p, y, cfg, reference)?;
    Ok((reconstruct(&state, p)?, trace))
}
