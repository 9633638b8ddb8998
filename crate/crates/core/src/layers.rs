//! The weight-tied layer `f_Θ`: a proximal-gradient step on the shared code
//! `S` (GIC layer) followed by one on the band-unique code `H` (LSU layer),
//! each followed by its learned prior, plus the reconstruction layer.

use rand::Rng;

use crate::error::{ensure_finite, DecscError, Result};
use crate::prior::detail::{net2_backward, net2_forward_cached, Net2Cache};
use crate::prior::swin::{net1_backward, net1_forward_cached, Net1Cache};
use crate::prior::{DetailEnhanceWeights, Net1Weights};
use crate::tensor::{
    conv2d_shared, conv2d_shared_adjoint, conv2d_shared_weight_grad, conv3d, conv3d_adjoint,
    conv3d_weight_grad, BandDictionary2D, Dictionary3D, Flat, HsiCube, SparseCodeH, SparseCodeS,
};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub bands: usize,
    pub atoms2d: usize,
    pub ksize2d: usize,
    pub atoms3d: usize,
    pub ksize3d: usize,
    pub kbands3d: usize,
    pub heads: usize,
    pub window: usize,
    pub stages: usize,
    pub use_net1: bool,
    pub use_net2: bool,
    pub theta_init: f64,
    pub prior_init_std: f64,
    /// Std of the attention weights; `None` uses `prior_init_std`.
    pub attention_init_std: Option<f64>,
    /// Zero the output side of each prior's residual branch (attention `W_o`,
    /// the dconv kernels and the second gate conv) so both priors start as
    /// the identity.
    pub prior_zero_out: bool,
    /// Rescale the initial dictionaries so the synthesis operator `[K, D]`
    /// has this spectral norm. `None` keeps the raw scaled-normal draw.
    pub init_op_norm: Option<f64>,
}

impl ModelConfig {
    /// Full-size architecture: 192 shared atoms of 9x9, 96 atoms of 9x9x3,
    /// four attention stages with 4x4 windows.
    pub fn paper(bands: usize) -> Self {
        Self {
            bands,
            atoms2d: 192,
            ksize2d: 9,
            atoms3d: 96,
            ksize3d: 9,
            kbands3d: 3,
            heads: 4,
            window: 4,
            stages: 4,
            use_net1: true,
            use_net2: true,
            theta_init: 0.01,
            prior_init_std: 0.02,
            attention_init_std: None,
            prior_zero_out: true,
            init_op_norm: Some(1.0),
        }
    }

    /// Desk-scale architecture used by the toy experiments.
    pub fn toy(bands: usize) -> Self {
        Self {
            atoms2d: 32,
            ksize2d: 5,
            atoms3d: 4,
            ksize3d: 5,
            ..Self::paper(bands)
        }
    }

    /// `M, J, 3x3 kernels` with small bands; used by gradient checks.
    pub fn tiny(bands: usize, atoms2d: usize, atoms3d: usize) -> Self {
        Self {
            atoms2d,
            ksize2d: 3,
            atoms3d,
            ksize3d: 3,
            heads: 2,
            prior_zero_out: false,
            ..Self::paper(bands)
        }
    }

    /// The gradient-check model: `tiny` with thresholds of 0.02 and random
    /// priors, std 0.2 for attention and 0.05 for the detail branch. A
    /// larger detail std makes five unrolled steps blow up; a smaller
    /// attention std leaves the query/key gradients near 1e-7, under the
    /// rounding noise of a central difference with step 1e-6.
    pub fn gradcheck(bands: usize) -> Self {
        Self {
            prior_init_std: 0.05,
            attention_init_std: Some(0.2),
            theta_init: 0.02,
            ..Self::tiny(bands, 4, 2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.atoms2d == 0 || self.atoms3d == 0 {
            return Err(DecscError::invalid("bands and atom counts must be positive"));
        }
        if self.ksize2d % 2 == 0 || self.ksize3d % 2 == 0 || self.kbands3d % 2 == 0 {
            return Err(DecscError::invalid("kernel sizes must be odd"));
        }
        if self.use_net1 && (self.heads == 0 || self.atoms2d % self.heads != 0) {
            return Err(DecscError::invalid(format!(
                "{} atoms cannot be split into {} heads",
                self.atoms2d, self.heads
            )));
        }
        if self.window == 0 {
            return Err(DecscError::invalid("window must be positive"));
        }
        if self.theta_init < 0.0 {
            return Err(DecscError::invalid("threshold must be nonnegative"));
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// All learnables Θ. Thresholds are stored unconstrained; `θ = softplus(raw)`.
/// A disabled prior (`None`) acts as the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub k: BandDictionary2D,
    pub w_k: BandDictionary2D,
    pub d: Dictionary3D,
    pub w_d: Dictionary3D,
    pub theta1_raw: f64,
    pub theta2_raw: f64,
    pub net1: Option<Net1Weights>,
    pub net2: Option<DetailEnhanceWeights>,
}

impl ModelParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k2 = cfg.ksize2d as f64;
        let k3 = cfg.ksize3d as f64;
        let std2 = 1.0 / (k2 * (cfg.atoms2d as f64).sqrt());
        let std3 = 1.0 / (k3 * (k3 * cfg.atoms3d as f64).sqrt());
        let k = BandDictionary2D::random_normal(cfg.atoms2d, cfg.bands, cfg.ksize2d, std2, rng)?;
        let d = Dictionary3D::random_normal(cfg.atoms3d, cfg.ksize3d, cfg.kbands3d, std3, rng)?;
        let net1 = if cfg.use_net1 {
            let mut n = Net1Weights::random(
                cfg.atoms2d,
                cfg.heads,
                cfg.window,
                cfg.stages,
                cfg.attention_init_std.unwrap_or(cfg.prior_init_std),
                rng,
            )?;
            if cfg.prior_zero_out {
                n.stages.iter_mut().for_each(|s| s.wo.fill(0.0));
            }
            Some(n)
        } else {
            None
        };
        let net2 = if cfg.use_net2 {
            let mut n = DetailEnhanceWeights::random(cfg.atoms3d, cfg.prior_init_std, rng)?;
            if cfg.prior_zero_out {
                for k in [
                    &mut n.plain,
                    &mut n.central,
                    &mut n.band,
                    &mut n.horizontal,
                    &mut n.vertical,
                    &mut n.conv_b,
                ] {
                    k.fill(0.0);
                }
            }
            Some(n)
        } else {
            None
        };
        let raw = softplus_inverse(cfg.theta_init.max(1e-300));
        let mut p = Self {
            w_k: k.clone(),
            k,
            w_d: d.clone(),
            d,
            theta1_raw: raw,
            theta2_raw: raw,
            net1,
            net2,
        };
        if let Some(target) = cfg.init_op_norm {
            let probe = 32.max(2 * cfg.ksize2d).max(2 * cfg.ksize3d);
            let est = operator_norm_estimate(&p, probe, probe, 50, rng)?;
            if est > 0.0 {
                p.scale_dictionaries(target / est);
            }
        }
        Ok(p)
    }

    /// The structure `init` would produce for `cfg`, with every value zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let k = BandDictionary2D::zeros(cfg.atoms2d, cfg.bands, cfg.ksize2d)?;
        let d = Dictionary3D::zeros(cfg.atoms3d, cfg.ksize3d, cfg.kbands3d)?;
        Ok(Self {
            w_k: k.clone(),
            k,
            w_d: d.clone(),
            d,
            theta1_raw: 0.0,
            theta2_raw: 0.0,
            net1: if cfg.use_net1 {
                Some(Net1Weights::zeros(cfg.atoms2d, cfg.heads, cfg.window, cfg.stages)?)
            } else {
                None
            },
            net2: cfg.use_net2.then(|| DetailEnhanceWeights::zeros(cfg.atoms3d)),
        })
    }

    pub fn theta1(&self) -> f64 {
        softplus(self.theta1_raw)
    }

    pub fn theta2(&self) -> f64 {
        softplus(self.theta2_raw)
    }

    pub fn bands(&self) -> usize {
        self.k.bands()
    }

    /// Scales `K, W_K, D, W_D` uniformly by `factor`.
    pub fn scale_dictionaries(&mut self, factor: f64) {
        self.k.scale(factor);
        self.w_k.scale(factor);
        self.d.scale(factor);
        self.w_d.scale(factor);
    }

    /// Same structure with every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, v) in z.leaves_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// Named flat views of every parameter leaf, in a fixed order.
    pub fn leaves(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("dict2d.K".into(), self.k.data()),
            ("dict2d.W_K".into(), self.w_k.data()),
            ("dict3d.D".into(), self.d.data()),
            ("dict3d.W_D".into(), self.w_d.data()),
            ("theta1_raw".into(), std::slice::from_ref(&self.theta1_raw)),
            ("theta2_raw".into(), std::slice::from_ref(&self.theta2_raw)),
        ];
        if let Some(n1) = &self.net1 {
            for (i, s) in n1.stages.iter().enumerate() {
                out.push((format!("net1.stage{i}.wq"), &s.wq));
                out.push((format!("net1.stage{i}.wk"), &s.wk));
                out.push((format!("net1.stage{i}.wv"), &s.wv));
                out.push((format!("net1.stage{i}.wo"), &s.wo));
            }
        }
        if let Some(n2) = &self.net2 {
            for (name, k) in DetailEnhanceWeights::KERNEL_NAMES.iter().zip(n2.kernels()) {
                out.push((format!("net2.{name}"), k.as_slice()));
            }
        }
        out
    }

    /// Logical shape of each leaf, aligned with `leaves`.
    pub fn leaf_shapes(&self) -> Vec<Vec<usize>> {
        let dict2 = vec![self.k.bands(), self.k.atoms(), self.k.ksize(), self.k.ksize()];
        let dict3 = vec![self.d.atoms(), self.d.kbands(), self.d.ksize(), self.d.ksize()];
        let mut out = vec![dict2.clone(), dict2, dict3.clone(), dict3, vec![], vec![]];
        if let Some(n1) = &self.net1 {
            for s in &n1.stages {
                out.extend(std::iter::repeat(vec![s.dim, s.dim]).take(4));
            }
        }
        if let Some(n2) = &self.net2 {
            let c = n2.channels;
            out.extend(std::iter::repeat(vec![c, c, 3, 3, 3]).take(7));
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("dict2d.K".into(), self.k.data_mut()),
            ("dict2d.W_K".into(), self.w_k.data_mut()),
            ("dict3d.D".into(), self.d.data_mut()),
            ("dict3d.W_D".into(), self.w_d.data_mut()),
            ("theta1_raw".into(), std::slice::from_mut(&mut self.theta1_raw)),
            ("theta2_raw".into(), std::slice::from_mut(&mut self.theta2_raw)),
        ];
        if let Some(n1) = &mut self.net1 {
            for (i, s) in n1.stages.iter_mut().enumerate() {
                out.push((format!("net1.stage{i}.wq"), &mut s.wq));
                out.push((format!("net1.stage{i}.wk"), &mut s.wk));
                out.push((format!("net1.stage{i}.wv"), &mut s.wv));
                out.push((format!("net1.stage{i}.wo"), &mut s.wo));
            }
        }
        if let Some(n2) = &mut self.net2 {
            for (name, k) in DetailEnhanceWeights::KERNEL_NAMES.iter().zip(n2.kernels_mut()) {
                out.push((format!("net2.{name}"), k.as_mut_slice()));
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.leaves().into_iter().flat_map(|(_, v)| v.to_vec()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(DecscError::shape("flat parameter vector length"));
        }
        let mut off = 0;
        for (_, v) in self.leaves_mut() {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    fn check_cube(&self, y: &HsiCube) -> Result<()> {
        if y.bands() != self.k.bands() {
            return Err(DecscError::shape(format!(
                "cube has {} bands, model {}",
                y.bands(),
                self.k.bands()
            )));
        }
        Ok(())
    }
}

/// Packed fixed-point state α = (S, H).
#[derive(Clone, Debug, PartialEq)]
pub struct DeqState {
    pub s: SparseCodeS,
    pub h: SparseCodeH,
}

impl DeqState {
    /// The all-zero initial state α⁰ for a given observation size.
    pub fn zeros(p: &ModelParams, height: usize, width: usize) -> Self {
        Self {
            s: SparseCodeS::zeros(p.k.atoms(), height, width),
            h: SparseCodeH::zeros(p.d.atoms(), height, width, p.k.bands()),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len() + self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.s.data());
        v.extend_from_slice(self.h.data());
        v
    }

    /// Rebuilds a state with the same shape as `self` from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(DecscError::shape("flat state length"));
        }
        let (a, b) = flat.split_at(self.s.len());
        let mut out = self.clone();
        out.s.data_mut().copy_from_slice(a);
        out.h.data_mut().copy_from_slice(b);
        Ok(out)
    }

    pub fn norm(&self) -> f64 {
        (self.s.norm().powi(2) + self.h.norm().powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.s.is_finite() && self.h.is_finite()
    }

    fn check(&self, p: &ModelParams, y: &HsiCube) -> Result<()> {
        p.check_cube(y)?;
        let ok = self.s.channels() == p.k.atoms()
            && (self.s.height(), self.s.width()) == (y.height(), y.width())
            && self.h.channels() == p.d.atoms()
            && (self.h.height(), self.h.width(), self.h.bands()) == y.dims();
        if ok {
            Ok(())
        } else {
            Err(DecscError::shape("state does not match model and observation"))
        }
    }
}

/// Elementwise `sign(x) * max(|x| - θ, 0)`.
pub fn soft_threshold(x: &[f64], theta: f64) -> Result<Vec<f64>> {
    if theta.is_nan() || theta < 0.0 {
        return Err(DecscError::invalid(format!("threshold {theta} must be nonnegative")));
    }
    Ok(x.iter().map(|&v| shrink(v, theta)).collect())
}

#[inline]
fn shrink(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// `½‖Y − K⊗S − D⋆H‖²_F + λ1‖S‖₁ + λ2‖H‖₁`
pub fn objective(state: &DeqState, y: &HsiCube, p: &ModelParams, lambda1: f64, lambda2: f64) -> Result<f64> {
    let r = y.sub(&reconstruct(state, p)?)?;
    let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
    Ok(0.5 * r.norm().powi(2) + lambda1 * l1(state.s.data()) + lambda2 * l1(state.h.data()))
}

/// Intermediates of one layer application, enough for its exact VJP.
#[derive(Clone, Debug)]
pub struct StepCache {
    s_in: SparseCodeS,
    h_in: SparseCodeH,
    r1: HsiCube,
    a1: Vec<f64>,
    net1: Option<Net1Cache>,
    s_out: SparseCodeS,
    r2: HsiCube,
    a2: Vec<f64>,
    net2: Option<Net2Cache>,
}

impl StepCache {
    /// Number of stored scalars (used for the tape memory contract).
    pub fn scalars(&self) -> usize {
        self.s_in.len()
            + self.h_in.len()
            + self.r1.len()
            + self.a1.len()
            + self.net1.as_ref().map_or(0, Net1Cache::scalars)
            + self.s_out.len()
            + self.r2.len()
            + self.a2.len()
            + self.net2.as_ref().map_or(0, Net2Cache::scalars)
    }

    /// Smallest distance of a pre-threshold entry to the ±θ kinks.
    pub fn threshold_margin(&self, p: &ModelParams) -> f64 {
        let m = |a: &[f64], t: f64| a.iter().map(|v| (v.abs() - t).abs()).fold(f64::INFINITY, f64::min);
        m(&self.a1, p.theta1()).min(m(&self.a2, p.theta2()))
    }

    /// The state this step was applied to.
    pub fn input(&self) -> DeqState {
        DeqState {
            s: self.s_in.clone(),
            h: self.h_in.clone(),
        }
    }

    pub fn output_s(&self) -> &SparseCodeS {
        &self.s_out
    }
}

struct GicOut {
    r1: HsiCube,
    a1: Vec<f64>,
    s_new: SparseCodeS,
    cache: Option<Net1Cache>,
}

fn gic_core(s: &SparseCodeS, u: &HsiCube, y: &HsiCube, p: &ModelParams, record: bool) -> Result<GicOut> {
    let c = conv2d_shared(&p.k, s)?;
    let r1 = y.sub(&c)?.sub(u)?;
    let mut a1 = conv2d_shared_adjoint(&p.w_k, &r1)?;
    a1.axpy(1.0, s);
    ensure_finite(a1.data(), "GIC gradient step")?;
    let t1 = SparseCodeS::from_vec(
        s.channels(),
        s.height(),
        s.width(),
        soft_threshold(a1.data(), p.theta1())?,
    )?;
    let (s_new, cache) = match &p.net1 {
        Some(w) if record => {
            let (o, c) = net1_forward_cached(&t1, w)?;
            (o, Some(c))
        }
        Some(w) => (crate::prior::net1_apply(&t1, w)?, None),
        None => (t1, None),
    };
    ensure_finite(s_new.data(), "GIC prior")?;
    Ok(GicOut {
        r1,
        a1: a1.into_vec(),
        s_new,
        cache,
    })
}

struct LsuOut {
    r2: HsiCube,
    a2: Vec<f64>,
    h_new: SparseCodeH,
    cache: Option<Net2Cache>,
}

fn lsu_core(
    s_new: &SparseCodeS,
    h: &SparseCodeH,
    u: &HsiCube,
    y: &HsiCube,
    p: &ModelParams,
    record: bool,
) -> Result<LsuOut> {
    let c = conv2d_shared(&p.k, s_new)?;
    let r2 = y.sub(&c)?.sub(u)?;
    let mut a2 = conv3d_adjoint(&p.w_d, &r2)?;
    a2.axpy(1.0, h);
    ensure_finite(a2.data(), "LSU gradient step")?;
    let t2 = SparseCodeH::from_vec(
        h.channels(),
        h.height(),
        h.width(),
        h.bands(),
        soft_threshold(a2.data(), p.theta2())?,
    )?;
    let (h_new, cache) = match &p.net2 {
        Some(w) if record => {
            let (o, c) = net2_forward_cached(&t2, w)?;
            (o, Some(c))
        }
        Some(w) => (crate::prior::net2_apply(&t2, w)?, None),
        None => (t2, None),
    };
    ensure_finite(h_new.data(), "LSU prior")?;
    Ok(LsuOut {
        r2,
        a2: a2.into_vec(),
        h_new,
        cache,
    })
}

/// `S′ = Net₁(Soft_θ1(S + W_K ⊗ (Y − K⊗S − D⋆H)))`
pub fn gic_update(state: &DeqState, y: &HsiCube, p: &ModelParams) -> Result<SparseCodeS> {
    state.check(p, y)?;
    let u = conv3d(&p.d, &state.h)?;
    Ok(gic_core(&state.s, &u, y, p, false)?.s_new)
}

/// `H′ = Net₂(Soft_θ2(H + W_D ⋆ (Y − K⊗S_new − D⋆H)))`, using the fresh `S_new`.
pub fn lsu_update(
    s_new: &SparseCodeS,
    state: &DeqState,
    y: &HsiCube,
    p: &ModelParams,
) -> Result<SparseCodeH> {
    state.check(p, y)?;
    if !s_new.same_shape(&state.s) {
        return Err(DecscError::shape("updated S does not match state"));
    }
    let u = conv3d(&p.d, &state.h)?;
    Ok(lsu_core(s_new, &state.h, &u, y, p, false)?.h_new)
}

/// One application of `f_Θ(α, Y)`.
pub fn layer_step(state: &DeqState, y: &HsiCube, p: &ModelParams) -> Result<DeqState> {
    state.check(p, y)?;
    let u = conv3d(&p.d, &state.h)?;
    let g = gic_core(&state.s, &u, y, p, false)?;
    let l = lsu_core(&g.s_new, &state.h, &u, y, p, false)?;
    Ok(DeqState {
        s: g.s_new,
        h: l.h_new,
    })
}

/// [`layer_step`] that also records its intermediates.
pub fn layer_step_cached(state: &DeqState, y: &HsiCube, p: &ModelParams) -> Result<(DeqState, StepCache)> {
    state.check(p, y)?;
    let u = conv3d(&p.d, &state.h)?;
    let g = gic_core(&state.s, &u, y, p, true)?;
    let l = lsu_core(&g.s_new, &state.h, &u, y, p, true)?;
    let out = DeqState {
        s: g.s_new.clone(),
        h: l.h_new,
    };
    let cache = StepCache {
        s_in: state.s.clone(),
        h_in: state.h.clone(),
        r1: g.r1,
        a1: g.a1,
        net1: g.cache,
        s_out: g.s_new,
        r2: l.r2,
        a2: l.a2,
        net2: l.cache,
    };
    Ok((out, cache))
}

/// `X̂ = K⊗S + D⋆H`
pub fn reconstruct(state: &DeqState, p: &ModelParams) -> Result<HsiCube> {
    let c = conv2d_shared(&p.k, &state.s)?;
    let u = conv3d(&p.d, &state.h)?;
    c.add(&u)
}

/// Reverse pass of [`reconstruct`]: accumulates `K̄, D̄` and returns `(S̄, H̄)`.
pub fn reconstruct_backward(
    state: &DeqState,
    xbar: &HsiCube,
    p: &ModelParams,
    grads: &mut ModelParams,
) -> Result<DeqState> {
    grads
        .k
        .axpy(1.0, &conv2d_shared_weight_grad(&p.k, &state.s, xbar)?);
    grads.d.axpy(1.0, &conv3d_weight_grad(&p.d, &state.h, xbar)?);
    Ok(DeqState {
        s: conv2d_shared_adjoint(&p.k, xbar)?,
        h: conv3d_adjoint(&p.d, xbar)?,
    })
}

/// Soft-threshold VJP: returns `x̄` and the contribution to `θ̄`.
fn shrink_backward(x: &[f64], theta: f64, tbar: &[f64]) -> (Vec<f64>, f64) {
    let mut theta_bar = 0.0;
    let xbar = x
        .iter()
        .zip(tbar)
        .map(|(&v, &g)| {
            if v > theta {
                theta_bar -= g;
                g
            } else if v < -theta {
                theta_bar += g;
                g
            } else {
                0.0
            }
        })
        .collect();
    (xbar, theta_bar)
}

/// Exact VJP of one cached layer step. Parameter cotangents accumulate into
/// `grads`; the state cotangent is returned only when `need_input` is set.
pub fn layer_step_backward(
    cache: &StepCache,
    out_bar: &DeqState,
    p: &ModelParams,
    grads: &mut ModelParams,
    need_input: bool,
) -> Result<Option<DeqState>> {
    // LSU prior and threshold.
    let t2bar = match (&p.net2, &cache.net2, &mut grads.net2) {
        (Some(w), Some(c), Some(g)) => net2_backward(c, &out_bar.h, w, g),
        _ => out_bar.h.clone(),
    };
    let (a2bar, th2) = shrink_backward(&cache.a2, p.theta2(), t2bar.data());
    grads.theta2_raw += th2 * sigmoid(p.theta2_raw);
    let a2bar = SparseCodeH::from_vec(
        t2bar.channels(),
        t2bar.height(),
        t2bar.width(),
        t2bar.bands(),
        a2bar,
    )?;
    // A2 = H + W_D ⋆ R2
    grads.w_d.axpy(1.0, &conv3d_weight_grad(&p.w_d, &a2bar, &cache.r2)?);
    let r2bar = conv3d(&p.w_d, &a2bar)?;
    // R2 = Y − K⊗S′ − U
    let mut sbar_out = out_bar.s.clone();
    sbar_out.axpy(-1.0, &conv2d_shared_adjoint(&p.k, &r2bar)?);
    let mut kbar = conv2d_shared_weight_grad(&p.k, &cache.s_out, &r2bar)?;
    kbar.scale(-1.0);
    grads.k.axpy(1.0, &kbar);

    // GIC prior and threshold.
    let t1bar = match (&p.net1, &cache.net1, &mut grads.net1) {
        (Some(w), Some(c), Some(g)) => net1_backward(c, &sbar_out, w, g),
        _ => sbar_out,
    };
    let (a1bar, th1) = shrink_backward(&cache.a1, p.theta1(), t1bar.data());
    grads.theta1_raw += th1 * sigmoid(p.theta1_raw);
    let a1bar = SparseCodeS::from_vec(t1bar.channels(), t1bar.height(), t1bar.width(), a1bar)?;
    // A1 = S + W_K ⊗ R1
    grads
        .w_k
        .axpy(1.0, &conv2d_shared_weight_grad(&p.w_k, &a1bar, &cache.r1)?);
    let r1bar = conv2d_shared(&p.w_k, &a1bar)?;

    // R1 = Y − K⊗S − U, R2 = Y − K⊗S′ − U with U = D⋆H.
    let ubar = r1bar.add(&r2bar)?;
    let mut kb = conv2d_shared_weight_grad(&p.k, &cache.s_in, &r1bar)?;
    kb.scale(-1.0);
    grads.k.axpy(1.0, &kb);
    let mut db = conv3d_weight_grad(&p.d, &cache.h_in, &ubar)?;
    db.scale(-1.0);
    grads.d.axpy(1.0, &db);

    if !need_input {
        return Ok(None);
    }
    let mut sbar = a1bar;
    sbar.axpy(-1.0, &conv2d_shared_adjoint(&p.k, &r1bar)?);
    let mut hbar = a2bar;
    hbar.axpy(-1.0, &conv3d_adjoint(&p.d, &ubar)?);
    Ok(Some(DeqState { s: sbar, h: hbar }))
}

/// Power-iteration estimate of the spectral norm of `(S, H) ↦ K⊗S + D⋆H`
/// on an `height x width` grid.
pub fn operator_norm_estimate<R: Rng>(
    p: &ModelParams,
    height: usize,
    width: usize,
    iters: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut v = DeqState::zeros(p, height, width);
    v.s.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    v.h.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let n = v.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        v.s.scale(1.0 / n);
        v.h.scale(1.0 / n);
        let r = reconstruct(&v, p)?;
        sigma = r.norm();
        v = DeqState {
            s: conv2d_shared_adjoint(&p.k, &r)?,
            h: conv3d_adjoint(&p.d, &r)?,
        };
    }
    Ok(sigma)
}
