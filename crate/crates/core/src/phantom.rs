//! Phantom gradients: reverse-mode differentiation through `L` layer
//! applications started from a detached equilibrium, plus finite-difference
//! and truncated-Neumann oracles used to verify them.

use std::fmt::Write as _;

use crate::error::{DecscError, Result};
use crate::layers::{
    layer_step, layer_step_backward, layer_step_cached, reconstruct, reconstruct_backward,
    DeqState, ModelParams, StepCache,
};
use crate::tensor::{inner_product, Flat, HsiCube};

/// Largest state for which the dense Jacobian oracle is built.
pub const MAX_DENSE_STATE: usize = 200;

/// Relative residual accepted as a fixed point by the dense oracle.
pub const FIXED_POINT_TOL: f64 = 1e-8;

/// Recorded intermediates of an `L`-step unroll.
#[derive(Clone, Debug)]
pub struct UnrollTape {
    steps: Vec<StepCache>,
    output: DeqState,
    dims: (usize, usize, usize),
}

impl UnrollTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State entering the final recorded step.
    pub fn last_input(&self) -> Option<DeqState> {
        self.steps.last().map(|c| c.input())
    }

    pub fn output(&self) -> &DeqState {
        &self.output
    }

    /// Scalars held by the tape; linear in `L`.
    pub fn stored_scalars(&self) -> usize {
        self.steps.iter().map(StepCache::scalars).sum::<usize>() + self.output.len()
    }
}

/// One gradient leaf per parameter leaf; same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet(pub ModelParams);

impl GradSet {
    pub fn zeros(p: &ModelParams) -> Self {
        Self(p.zeros_like())
    }

    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        self.0.leaves()
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for ((_, a), (_, b)) in self.0.leaves_mut().into_iter().zip(other.0.leaves()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, f: f64) {
        for (_, a) in self.0.leaves_mut() {
            a.iter_mut().for_each(|x| *x *= f);
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }
}

/// Applies the layer `L` times from `alpha_star`, recording every step.
pub fn unroll_forward(
    alpha_star: &DeqState,
    z: &HsiCube,
    l: usize,
    p: &ModelParams,
) -> Result<(DeqState, UnrollTape)> {
    if l == 0 {
        return Err(DecscError::invalid("unroll length must be at least 1"));
    }
    let mut state = alpha_star.clone();
    let mut steps = Vec::with_capacity(l);
    for _ in 0..l {
        let (next, cache) = layer_step_cached(&state, z, p)?;
        steps.push(cache);
        state = next;
    }
    let tape = UnrollTape {
        steps,
        output: state.clone(),
        dims: z.dims(),
    };
    Ok((state, tape))
}

/// Exact gradient of `⟨X̂, dX̂⟩` through the recorded unroll and the
/// reconstruction layer. Nothing flows into the starting state.
pub fn phantom_backward(tape: &UnrollTape, dxhat: &HsiCube, p: &ModelParams) -> Result<GradSet> {
    if dxhat.dims() != tape.dims {
        return Err(DecscError::shape("cotangent does not match tape"));
    }
    let mut g = p.zeros_like();
    let mut cot = reconstruct_backward(&tape.output, dxhat, p, &mut g)?;
    for (i, step) in tape.steps.iter().enumerate().rev() {
        match layer_step_backward(step, &cot, p, &mut g, i > 0)? {
            Some(c) => cot = c,
            None => break,
        }
    }
    Ok(GradSet(g))
}

/// `phantom_backward` with extra cotangents on intermediate states: `(i, c)`
/// adds `c` to the cotangent of the state entering step `i` (`1 ≤ i < L`) or
/// of the unroll output (`i = L`).
pub fn phantom_backward_seeded(
    tape: &UnrollTape,
    dxhat: &HsiCube,
    p: &ModelParams,
    extra: &[(usize, DeqState)],
) -> Result<GradSet> {
    if dxhat.dims() != tape.dims {
        return Err(DecscError::shape("cotangent does not match tape"));
    }
    if extra.iter().any(|(i, c)| *i == 0 || *i > tape.len() || c.len() != tape.output.len()) {
        return Err(DecscError::invalid("seeded cotangent index or size out of range"));
    }
    let seed = |cot: DeqState, at: usize| -> Result<DeqState> {
        let mut flat = cot.to_flat();
        for (_, c) in extra.iter().filter(|(i, _)| *i == at) {
            flat.iter_mut().zip(c.to_flat()).for_each(|(a, b)| *a += b);
        }
        cot.with_flat(&flat)
    };
    let mut g = p.zeros_like();
    let mut cot = seed(reconstruct_backward(&tape.output, dxhat, p, &mut g)?, tape.len())?;
    for (i, step) in tape.steps.iter().enumerate().rev() {
        match layer_step_backward(step, &cot, p, &mut g, i > 0)? {
            Some(c) => cot = seed(c, i)?,
            None => break,
        }
    }
    Ok(GradSet(g))
}

/// Central differences of `loss_eval` with respect to every scalar parameter.
pub fn finite_diff_grad<F>(mut loss_eval: F, p: &ModelParams, eps: f64) -> Result<GradSet>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    central_differences(&mut loss_eval, |up, down| up - down, p, eps)
}

/// Central differences of `‖g(q) − x‖²` where `eval` returns `g(q)`. The
/// loss difference is formed as `⟨g₊ − g₋, g₊ + g₋ − 2x⟩`, so the large
/// common part of the two losses never has to cancel.
pub fn finite_diff_sq_grad<F>(mut eval: F, x: &[f64], p: &ModelParams, eps: f64) -> Result<GradSet>
where
    F: FnMut(&ModelParams) -> Result<Vec<f64>>,
{
    let diff = |up: &Vec<f64>, down: &Vec<f64>| {
        up.iter()
            .zip(down)
            .zip(x)
            .map(|((u, d), t)| (u - d) * (u + d - 2.0 * t))
            .sum::<f64>()
    };
    central_differences(&mut eval, diff, p, eps)
}

fn central_differences<T, F, D>(eval: &mut F, diff: D, p: &ModelParams, eps: f64) -> Result<GradSet>
where
    F: FnMut(&ModelParams) -> Result<T>,
    D: Fn(&T, &T) -> f64,
{
    let mut q = p.clone();
    let mut g = p.zeros_like();
    let sizes: Vec<usize> = p.leaves().iter().map(|(_, v)| v.len()).collect();
    for (li, &n) in sizes.iter().enumerate() {
        for ei in 0..n {
            let orig = p.leaves()[li].1[ei];
            q.leaves_mut()[li].1[ei] = orig + eps;
            let up = eval(&q)?;
            q.leaves_mut()[li].1[ei] = orig - eps;
            let down = eval(&q)?;
            q.leaves_mut()[li].1[ei] = orig;
            let d = diff(&up, &down) / (2.0 * eps);
            if !d.is_finite() {
                return Err(DecscError::NonFinite {
                    stage: "finite-difference loss",
                });
            }
            g.leaves_mut()[li].1[ei] = d;
        }
    }
    Ok(GradSet(g))
}

/// `X̂` after unrolling `L` steps from a fixed `alpha_star`.
pub fn unrolled_reconstruction(alpha_star: &DeqState, y: &HsiCube, l: usize, p: &ModelParams) -> Result<HsiCube> {
    let mut s = alpha_star.clone();
    for _ in 0..l {
        s = layer_step(&s, y, p)?;
    }
    reconstruct(&s, p)
}

/// `‖X̂ − X‖²_F` after unrolling `L` steps from a fixed `alpha_star`.
pub fn unrolled_loss(alpha_star: &DeqState, y: &HsiCube, x: &HsiCube, l: usize, p: &ModelParams) -> Result<f64> {
    let r = unrolled_reconstruction(alpha_star, y, l, p)?.sub(x)?;
    Ok(r.norm().powi(2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub block: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Entries compared (those with magnitude above the floor).
    pub compared: usize,
}

/// Elementwise `|a − b| / max(|a|, |b|)` per block, over entries where
/// `max(|a|, |b|) > floor`.
pub fn compare_grads(a: &GradSet, b: &GradSet, floor: f64) -> Vec<GradCheckRow> {
    a.blocks()
        .into_iter()
        .zip(b.blocks())
        .map(|((name, x), (_, y))| {
            let errs: Vec<f64> = x
                .iter()
                .zip(y)
                .filter(|(u, v)| u.abs().max(v.abs()) > floor)
                .map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()))
                .collect();
            let max = errs.iter().copied().fold(0.0, f64::max);
            let mean = if errs.is_empty() {
                0.0
            } else {
                errs.iter().sum::<f64>() / errs.len() as f64
            };
            GradCheckRow {
                block: name,
                max_rel_err: max,
                mean_rel_err: mean,
                compared: errs.len(),
            }
        })
        .collect()
}

pub fn grad_check_csv(rows: &[GradCheckRow]) -> String {
    let mut out = String::from("param_block,max_rel_err,mean_rel_err\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e}", r.block, r.max_rel_err, r.mean_rel_err);
    }
    out
}

/// Phantom gradient of the squared reconstruction error versus central
/// finite differences, both with `alpha_star` held fixed.
pub fn grad_check(
    p: &ModelParams,
    alpha_star: &DeqState,
    y: &HsiCube,
    x: &HsiCube,
    l: usize,
    eps: f64,
) -> Result<Vec<GradCheckRow>> {
    let (out, tape) = unroll_forward(alpha_star, y, l, p)?;
    let mut dx = reconstruct(&out, p)?.sub(x)?;
    dx.scale(2.0);
    let phantom = phantom_backward(&tape, &dx, p)?;
    let fd = finite_diff_sq_grad(
        |q| unrolled_reconstruction(alpha_star, y, l, q).map(|c| c.data().to_vec()),
        x.data(),
        p,
        eps,
    )?;
    Ok(compare_grads(&phantom, &fd, 1e-8))
}

/// `Σ_{l<L} cotᵀ Jˡ B` for a dense `n x n` Jacobian `J` (row-major) and
/// `n x q` matrix `B` (row-major).
pub fn truncated_neumann(jac: &[f64], b: &[f64], cot: &[f64], l: usize) -> Result<Vec<f64>> {
    let n = cot.len();
    if jac.len() != n * n || n == 0 || b.len() % n != 0 {
        return Err(DecscError::shape("Neumann operands"));
    }
    let q = b.len() / n;
    // v ← Σ (Jᵀ)ˡ cot
    let mut term = cot.to_vec();
    let mut acc = cot.to_vec();
    for _ in 1..l {
        let mut next = vec![0.0; n];
        for (i, ti) in term.iter().enumerate() {
            for (nx, jv) in next.iter_mut().zip(&jac[i * n..(i + 1) * n]) {
                *nx += ti * jv;
            }
        }
        term = next;
        acc.iter_mut().zip(&term).for_each(|(a, t)| *a += t);
    }
    let mut out = vec![0.0; q];
    for (i, ai) in acc.iter().enumerate() {
        for (o, bv) in out.iter_mut().zip(&b[i * q..(i + 1) * q]) {
            *o += ai * bv;
        }
    }
    Ok(out)
}

/// Relative gap between the phantom gradient of `⟨X̂, c⟩` and the explicit
/// truncated Neumann expression built from finite-difference Jacobians,
/// both at a tightly solved fixed point of the model.
pub fn neumann_terms_equivalence_check(
    p: &ModelParams,
    z: &HsiCube,
    cot: &HsiCube,
    l: usize,
) -> Result<f64> {
    neumann_report(p, z, cot, l).map(|r| r.gap)
}

/// Largest finite-difference step of the Neumann oracle.
pub const NEUMANN_FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeumannReport {
    pub gap: f64,
    pub fixed_point_residual: f64,
    /// Distance of the nearest soft-threshold input to a kink at α*.
    pub kink_margin: f64,
    pub step: f64,
}

/// [`neumann_terms_equivalence_check`] with its diagnostics. The difference
/// step shrinks below [`NEUMANN_FD_STEP`] when a threshold input sits close
/// to its kink, so the stencil stays on one linear piece.
pub fn neumann_report(p: &ModelParams, z: &HsiCube, cot: &HsiCube, l: usize) -> Result<NeumannReport> {
    let (rows, cols, _) = z.dims();
    let zero = DeqState::zeros(p, rows, cols);
    let n = zero.len();
    if n > MAX_DENSE_STATE {
        return Err(DecscError::StateTooLarge {
            dim: n,
            max: MAX_DENSE_STATE,
        });
    }
    if l == 0 {
        return Err(DecscError::invalid("unroll length must be at least 1"));
    }
    let (flat, fixed_point_residual) = dense_fixed_point(p, z, &zero)?;
    let star = zero.with_flat(&flat)?;
    let kink_margin = layer_step_cached(&star, z, p)?.1.threshold_margin(p);
    let h = NEUMANN_FD_STEP.min(kink_margin / 20.0);
    let jac = dense_jacobian(p, z, &star, h)?;
    // u = (∂X̂/∂α)ᵀ c; reconstruction is linear in α.
    let c = cot.data();
    let mut u = vec![0.0; n];
    for (j, uj) in u.iter_mut().enumerate() {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        *uj = inner_product(reconstruct(&star.with_flat(&e)?, p)?.data(), c)?;
    }
    // ∂f/∂Θ (n x q) and the direct term ∂⟨X̂, c⟩/∂Θ, stacked per parameter.
    let q = p.num_scalars();
    let theta = p.to_flat();
    let mut dfdt = vec![0.0; n * q];
    let mut direct = vec![0.0; q];
    let mut pp = p.clone();
    for k in 0..q {
        let col = stencil(
            |t| {
                let mut v = theta.clone();
                v[k] += t;
                pp.set_flat(&v)?;
                let mut out = layer_step(&star, z, &pp)?.to_flat();
                out.push(inner_product(reconstruct(&star, &pp)?.data(), c)?);
                Ok(out)
            },
            h,
        )?;
        for i in 0..n {
            dfdt[i * q + k] = col[i];
        }
        direct[k] = col[n];
    }
    let mut neumann = truncated_neumann(&jac, &dfdt, &u, l)?;
    neumann.iter_mut().zip(&direct).for_each(|(a, d)| *a += d);

    let (_, tape) = unroll_forward(&star, z, l, p)?;
    let phantom = phantom_backward(&tape, cot, p)?.to_flat();
    let diff: f64 = phantom
        .iter()
        .zip(&neumann)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = neumann.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(NeumannReport {
        gap: diff / scale.max(1e-300),
        fixed_point_residual,
        kink_margin,
        step: h,
    })
}

/// Fourth-order central difference of a vector-valued function along one
/// coordinate: `(−g(2h) + 8g(h) − 8g(−h) + g(−2h)) / 12h`.
fn stencil<F>(mut g: F, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    let p2 = g(2.0 * h)?;
    let p1 = g(h)?;
    let m1 = g(-h)?;
    let m2 = g(-2.0 * h)?;
    Ok((0..p1.len())
        .map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h))
        .collect())
}

/// `∂f/∂α` at `at` by finite differences, row-major.
fn dense_jacobian(p: &ModelParams, z: &HsiCube, at: &DeqState, h: f64) -> Result<Vec<f64>> {
    let flat = at.to_flat();
    let n = flat.len();
    let mut jac = vec![0.0; n * n];
    for j in 0..n {
        let col = stencil(
            |t| {
                let mut v = flat.clone();
                v[j] += t;
                Ok(layer_step(&at.with_flat(&v)?, z, p)?.to_flat())
            },
            h,
        )?;
        for (i, c) in col.into_iter().enumerate() {
            jac[i * n + j] = c;
        }
    }
    Ok(jac)
}

/// Fixed point of a tiny model: Anderson warm start, then Newton steps on
/// `f(α) − α` with the dense Jacobian. Newton also finds repelling fixed
/// points, which the truncated-Neumann identity only needs to exist.
pub fn dense_fixed_point(p: &ModelParams, z: &HsiCube, template: &DeqState) -> Result<(Vec<f64>, f64)> {
    let n = template.len();
    let step = |a: &[f64]| layer_step(&template.with_flat(a)?, z, p).map(|s| s.to_flat());
    let residual = |a: &[f64]| -> f64 {
        match step(a) {
            Ok(fa) => crate::solver::relative_residual(a, &fa),
            Err(_) => f64::INFINITY,
        }
    };
    let long = crate::solver::SolverConfig {
        tol: 1e-14,
        max_iter: 5000,
        ..Default::default()
    };
    let mut best = (f64::INFINITY, template.to_flat());
    if let Ok((x, _)) = crate::solver::anderson_solve(step, &template.to_flat(), &long) {
        best = (residual(&x), x);
    }
    // Plain iterations as a second opinion; keep the best iterate seen.
    let mut x = template.to_flat();
    for _ in 0..200 {
        let fx = match step(&x) {
            Ok(v) => v,
            Err(_) => break,
        };
        let r = crate::solver::relative_residual(&x, &fx);
        if r < best.0 {
            best = (r, x.clone());
        }
        x = fx;
    }
    let (mut res, mut x) = best;
    for _ in 0..60 {
        if res <= 1e-14 {
            return Ok((x, res));
        }
        let fx = step(&x)?;
        let jac = dense_jacobian(p, z, &template.with_flat(&x)?, 1e-5)?;
        let mut a = nalgebra::DMatrix::<f64>::from_row_slice(n, n, &jac);
        for i in 0..n {
            a[(i, i)] -= 1.0;
        }
        let rhs = nalgebra::DVector::<f64>::from_iterator(n, x.iter().zip(&fx).map(|(xi, fi)| xi - fi));
        // Null directions of the dictionaries make J − I singular; take the
        // minimum-norm step.
        let svd = a.svd(true, true);
        let cut = 1e-9 * svd.singular_values.max();
        let dx = svd.solve(&rhs, cut).map_err(|e| DecscError::invalid(e.to_string()))?;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(xi, d)| xi + t * d).collect();
            let r = residual(&trial);
            if r < res {
                x = trial;
                res = r;
                break;
            }
            t *= 0.5;
            if t < 1e-6 {
                return finish(x, res);
            }
        }
    }
    finish(x, res)
}

fn finish(x: Vec<f64>, res: f64) -> Result<(Vec<f64>, f64)> {
    if res <= FIXED_POINT_TOL {
        Ok((x, res))
    } else {
        Err(DecscError::invalid(format!("no fixed point found (residual {res:e})")))
    }
}
