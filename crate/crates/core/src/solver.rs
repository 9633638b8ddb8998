//! Fixed-point solvers for `α = f(α)`: plain iteration and Anderson
//! acceleration, both over flat state vectors.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{DecscError, Result};

const RESIDUAL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMethod {
    Naive,
    Anderson,
}

impl std::str::FromStr for SolverMethod {
    type Err = DecscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "anderson" => Ok(Self::Anderson),
            other => Err(DecscError::Config(format!("unknown solver method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub beta: f64,
    pub ridge: f64,
    /// Abort once the residual exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Anderson,
            tol: 1e-3,
            max_iter: 30,
            memory: 5,
            beta: 1.0,
            ridge: 1e-10,
            divergence_factor: 1e6,
        }
    }
}

impl SolverConfig {
    pub fn naive() -> Self {
        Self {
            method: SolverMethod::Naive,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(DecscError::invalid("tol must be positive"));
        }
        if self.max_iter == 0 || self.memory == 0 {
            return Err(DecscError::invalid("max_iter and memory must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(DecscError::invalid("beta must lie in (0, 1]"));
        }
        if !(self.ridge >= 0.0) {
            return Err(DecscError::invalid("ridge must be nonnegative"));
        }
        Ok(())
    }
}

/// How a γ vector was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaSource {
    Exact,
    Ridge,
    Fallback,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveTrace {
    pub residuals: Vec<f64>,
    /// PSNR of the reconstruction at each checked iterate, when a reference was supplied.
    pub psnr: Vec<Option<f64>>,
    pub converged: bool,
    pub ridge_solves: usize,
    pub gamma_fallbacks: usize,
}

impl SolveTrace {
    /// Number of map evaluations.
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,residual,psnr_if_reference_given\n");
        for (i, r) in self.residuals.iter().enumerate() {
            let p = match self.psnr.get(i).copied().flatten() {
                Some(v) => format!("{v}"),
                None => String::new(),
            };
            let _ = writeln!(out, "{i},{r:e},{p}");
        }
        out
    }
}

pub fn relative_residual(alpha: &[f64], f_alpha: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, f) in alpha.iter().zip(f_alpha) {
        num += (f - a) * (f - a);
        den += a * a;
    }
    num.sqrt() / (den.sqrt() + RESIDUAL_EPS)
}

/// `argmin ‖Gγ‖² s.t. Σγ = 1` for `G` given as columns.
///
/// The bordered KKT system is solved first. If it is singular or ill-posed
/// the ridge system `(GᵀG + λI)γ̃ = 1, γ = γ̃ / Σγ̃` is used, and if that
/// fails too the newest column gets all the weight.
pub fn solve_gamma(columns: &[Vec<f64>], ridge: f64) -> (Vec<f64>, GammaSource) {
    let m = columns.len();
    if m == 0 {
        return (Vec::new(), GammaSource::Fallback);
    }
    if m == 1 {
        return (vec![1.0], GammaSource::Exact);
    }
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    if let Some(g) = kkt_gamma(&gram) {
        return (g, GammaSource::Exact);
    }
    if let Some(g) = ridge_gamma(&gram, ridge) {
        return (g, GammaSource::Ridge);
    }
    let mut g = vec![0.0; m];
    g[m - 1] = 1.0;
    (g, GammaSource::Fallback)
}

fn acceptable(g: &[f64]) -> bool {
    g.iter().all(|v| v.is_finite() && v.abs() < 1e8)
}

fn kkt_gamma(gram: &DMatrix<f64>) -> Option<Vec<f64>> {
    let m = gram.nrows();
    let scale = gram.diagonal().max();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = gram[(i, j)] / scale;
        }
        a[(i, m)] = 1.0;
        a[(m, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs[m] = 1.0;
    let lu = a.lu();
    let u = lu.u();
    let umax = u.diagonal().amax();
    if u.diagonal().iter().any(|d| d.abs() <= 1e-13 * umax) {
        return None;
    }
    let x = lu.solve(&rhs)?;
    let g: Vec<f64> = x.iter().take(m).copied().collect();
    let sum: f64 = g.iter().sum();
    if acceptable(&g) && (sum - 1.0).abs() < 1e-9 {
        Some(normalize(g))
    } else {
        None
    }
}

fn ridge_gamma(gram: &DMatrix<f64>, ridge: f64) -> Option<Vec<f64>> {
    let m = gram.nrows();
    let a = gram + DMatrix::<f64>::identity(m, m) * ridge;
    let x = a.lu().solve(&DVector::<f64>::from_element(m, 1.0))?;
    let sum: f64 = x.iter().sum();
    if sum == 0.0 || !sum.is_finite() {
        return None;
    }
    let g: Vec<f64> = x.iter().map(|v| v / sum).collect();
    acceptable(&g).then(|| normalize(g))
}

/// Moves rounding error of the constraint onto the largest entry.
fn normalize(mut g: Vec<f64>) -> Vec<f64> {
    let sum: f64 = g.iter().sum();
    let k = g
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    g[k] += 1.0 - sum;
    g
}

/// Callback giving the PSNR of iterate `α_t`, if a reference is known.
pub type Monitor<'a> = dyn FnMut(&[f64]) -> Result<Option<f64>> + 'a;

struct Checker<'a, 'b> {
    cfg: &'a SolverConfig,
    trace: SolveTrace,
    monitor: Option<&'a mut Monitor<'b>>,
    /// First residual measured at a nonzero iterate; the residual at a zero
    /// start is scaled by the `1e-12` guard and says nothing about growth.
    reference: Option<f64>,
}

enum Check {
    Converged,
    Continue,
}

impl Checker<'_, '_> {
    fn record(&mut self, alpha: &[f64], f_alpha: &[f64]) -> Result<Check> {
        let r = relative_residual(alpha, f_alpha);
        let diverged = !r.is_finite()
            || !f_alpha.iter().all(|v| v.is_finite())
            || self.reference.is_some_and(|r0| r > self.cfg.divergence_factor * r0);
        if diverged {
            return Err(DecscError::Diverged {
                trace: std::mem::take(&mut self.trace),
            });
        }
        if self.reference.is_none() && alpha.iter().any(|v| *v != 0.0) {
            self.reference = Some(r);
        }
        self.trace.residuals.push(r);
        let p = match self.monitor.as_mut() {
            Some(m) => m(alpha)?,
            None => None,
        };
        self.trace.psnr.push(p);
        if r <= self.cfg.tol {
            self.trace.converged = true;
            Ok(Check::Converged)
        } else {
            Ok(Check::Continue)
        }
    }
}

/// `α_{t+1} = f(α_t)` until the relative residual drops to `tol` or
/// `max_iter` evaluations are spent. Returns the last iterate.
pub fn iterate_naive<F>(step: F, alpha0: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolveTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    iterate_naive_monitored(step, alpha0, cfg, None)
}

pub fn iterate_naive_monitored<F>(
    mut step: F,
    alpha0: &[f64],
    cfg: &SolverConfig,
    monitor: Option<&mut Monitor<'_>>,
) -> Result<(Vec<f64>, SolveTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut check = Checker {
        cfg,
        trace: SolveTrace::default(),
        monitor,
        reference: None,
    };
    let mut alpha = alpha0.to_vec();
    for _ in 0..cfg.max_iter {
        let fa = step(&alpha)?;
        if fa.len() != alpha.len() {
            return Err(DecscError::shape("step map changed the state length"));
        }
        if let Check::Converged = check.record(&alpha, &fa)? {
            return Ok((alpha, check.trace));
        }
        alpha = fa;
    }
    Ok((alpha, check.trace))
}

/// Anderson-accelerated fixed-point iteration with memory `m` and mixing `β`.
/// The first `m` updates are plain iterations that fill the history.
pub fn anderson_solve<F>(step: F, alpha0: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolveTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    anderson_solve_monitored(step, alpha0, cfg, None)
}

pub fn anderson_solve_monitored<F>(
    mut step: F,
    alpha0: &[f64],
    cfg: &SolverConfig,
    monitor: Option<&mut Monitor<'_>>,
) -> Result<(Vec<f64>, SolveTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let m = cfg.memory;
    let mut check = Checker {
        cfg,
        trace: SolveTrace::default(),
        monitor,
        reference: None,
    };
    let mut xs: VecDeque<Vec<f64>> = VecDeque::with_capacity(m);
    let mut fs: VecDeque<Vec<f64>> = VecDeque::with_capacity(m);
    let mut alpha = alpha0.to_vec();
    for t in 0..cfg.max_iter {
        let fa = step(&alpha)?;
        if fa.len() != alpha.len() {
            return Err(DecscError::shape("step map changed the state length"));
        }
        if let Check::Converged = check.record(&alpha, &fa)? {
            return Ok((alpha, check.trace));
        }
        if t < m || m == 1 {
            // Warm-up, and the m = 1 case where γ = (1) is forced.
            let next = if cfg.beta == 1.0 {
                fa.clone()
            } else {
                mix(&[1.0], &[alpha.as_slice()], &[fa.as_slice()], cfg.beta)
            };
            if m > 1 {
                push(&mut xs, &mut fs, alpha, fa, m);
            }
            alpha = next;
            continue;
        }
        push(&mut xs, &mut fs, alpha, fa, m);
        let g: Vec<Vec<f64>> = xs
            .iter()
            .zip(&fs)
            .map(|(x, f)| f.iter().zip(x).map(|(a, b)| a - b).collect())
            .collect();
        let (gamma, source) = solve_gamma(&g, cfg.ridge);
        match source {
            GammaSource::Ridge => check.trace.ridge_solves += 1,
            GammaSource::Fallback => check.trace.gamma_fallbacks += 1,
            GammaSource::Exact => {}
        }
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let fr: Vec<&[f64]> = fs.iter().map(Vec::as_slice).collect();
        alpha = mix(&gamma, &xr, &fr, cfg.beta);
    }
    Ok((alpha, check.trace))
}

fn push(xs: &mut VecDeque<Vec<f64>>, fs: &mut VecDeque<Vec<f64>>, x: Vec<f64>, f: Vec<f64>, m: usize) {
    if xs.len() == m {
        xs.pop_front();
        fs.pop_front();
    }
    xs.push_back(x);
    fs.push_back(f);
}

fn mix(gamma: &[f64], xs: &[&[f64]], fs: &[&[f64]], beta: f64) -> Vec<f64> {
    let n = fs[0].len();
    let mut out = vec![0.0; n];
    for (g, f) in gamma.iter().zip(fs) {
        let c = beta * g;
        for (o, v) in out.iter_mut().zip(f.iter()) {
            *o += c * v;
        }
    }
    if beta != 1.0 {
        for (g, x) in gamma.iter().zip(xs) {
            let c = (1.0 - beta) * g;
            for (o, v) in out.iter_mut().zip(x.iter()) {
                *o += c * v;
            }
        }
    }
    out
}

/// Dispatches on `cfg.method`.
pub fn solve<F>(
    step: F,
    alpha0: &[f64],
    cfg: &SolverConfig,
    monitor: Option<&mut Monitor<'_>>,
) -> Result<(Vec<f64>, SolveTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    match cfg.method {
        SolverMethod::Naive => iterate_naive_monitored(step, alpha0, cfg, monitor),
        SolverMethod::Anderson => anderson_solve_monitored(step, alpha0, cfg, monitor),
    }
}
