//! Detail enhancement on the band-unique code `H`:
//!
//! ```text
//! x <- x + DConv(x)
//! x <- x + x ⊙ Conv_b(Conv_a(x))
//! ```
//!
//! `DConv` sums a plain 3x3x3 convolution with four difference branches
//! (central, inter-band, horizontal, vertical). Each difference branch sees
//! only neighbour-minus-reference differences, so constant inputs vanish
//! exactly. All convolutions map `J -> J` channels without bias.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::attention::add_into;
use crate::error::{DecscError, Result};
use crate::tensor::corr::{self, CorrGeom};
use crate::tensor::{Flat, SparseCodeH};

#[derive(Clone, Debug, PartialEq)]
pub struct DetailEnhanceWeights {
    pub channels: usize,
    pub plain: Vec<f64>,
    pub central: Vec<f64>,
    pub band: Vec<f64>,
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
    pub conv_a: Vec<f64>,
    pub conv_b: Vec<f64>,
}

const TAPS: usize = 27;

impl DetailEnhanceWeights {
    pub fn zeros(channels: usize) -> Self {
        let z = vec![0.0; channels * channels * TAPS];
        Self {
            channels,
            plain: z.clone(),
            central: z.clone(),
            band: z.clone(),
            horizontal: z.clone(),
            vertical: z.clone(),
            conv_a: z.clone(),
            conv_b: z,
        }
    }

    pub fn random<R: Rng>(channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| DecscError::invalid(e.to_string()))?;
        let mut w = Self::zeros(channels);
        for k in w.kernels_mut() {
            k.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        Ok(w)
    }

    pub fn kernels(&self) -> [&Vec<f64>; 7] {
        [
            &self.plain,
            &self.central,
            &self.band,
            &self.horizontal,
            &self.vertical,
            &self.conv_a,
            &self.conv_b,
        ]
    }

    pub fn kernels_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.plain,
            &mut self.central,
            &mut self.band,
            &mut self.horizontal,
            &mut self.vertical,
            &mut self.conv_a,
            &mut self.conv_b,
        ]
    }

    pub const KERNEL_NAMES: [&'static str; 7] = [
        "plain",
        "central",
        "band",
        "horizontal",
        "vertical",
        "conv_a",
        "conv_b",
    ];
}

fn geom(h: &SparseCodeH) -> CorrGeom {
    CorrGeom {
        cin: h.channels(),
        cout: h.channels(),
        depth: h.bands(),
        height: h.height(),
        width: h.width(),
        kd: 3,
        kh: 3,
        kw: 3,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Band,
    Row,
    Col,
}

/// Forward difference `x[p + e] - x[p]` along `axis`, zero on the far edge.
fn diff(g: &CorrGeom, x: &[f64], axis: Axis) -> Vec<f64> {
    let (d, h, w) = (g.depth, g.height, g.width);
    let mut out = vec![0.0; x.len()];
    for ch in 0..g.cin {
        for z in 0..d {
            for r in 0..h {
                for c in 0..w {
                    let p = ((ch * d + z) * h + r) * w + c;
                    let next = match axis {
                        Axis::Band if z + 1 < d => Some(p + h * w),
                        Axis::Row if r + 1 < h => Some(p + w),
                        Axis::Col if c + 1 < w => Some(p + 1),
                        _ => None,
                    };
                    if let Some(q) = next {
                        out[p] = x[q] - x[p];
                    }
                }
            }
        }
    }
    out
}

fn diff_adjoint(g: &CorrGeom, gbar: &[f64], axis: Axis) -> Vec<f64> {
    let (d, h, w) = (g.depth, g.height, g.width);
    let mut out = vec![0.0; gbar.len()];
    for ch in 0..g.cin {
        for z in 0..d {
            for r in 0..h {
                for c in 0..w {
                    let p = ((ch * d + z) * h + r) * w + c;
                    let next = match axis {
                        Axis::Band if z + 1 < d => Some(p + h * w),
                        Axis::Row if r + 1 < h => Some(p + w),
                        Axis::Col if c + 1 < w => Some(p + 1),
                        _ => None,
                    };
                    if let Some(q) = next {
                        out[q] += gbar[p];
                        out[p] -= gbar[p];
                    }
                }
            }
        }
    }
    out
}

const DIFF_AXES: [Axis; 3] = [Axis::Band, Axis::Col, Axis::Row];

/// The five DConv branch outputs in order plain, central, inter-band,
/// horizontal, vertical.
pub fn dconv_branches(h: &SparseCodeH, w: &DetailEnhanceWeights) -> Result<[SparseCodeH; 5]> {
    check(h, w)?;
    let g = geom(h);
    let x = h.data();
    let wrap = |v: Vec<f64>| {
        SparseCodeH::from_vec(h.channels(), h.height(), h.width(), h.bands(), v)
            .expect("branch output mirrors input")
    };
    let plain = wrap(corr::forward(&g, &w.plain, x));
    let central = wrap(corr::central_diff_forward(&g, &w.central, x));
    let band = wrap(corr::forward(&g, &w.band, &diff(&g, x, Axis::Band)));
    let horizontal = wrap(corr::forward(&g, &w.horizontal, &diff(&g, x, Axis::Col)));
    let vertical = wrap(corr::forward(&g, &w.vertical, &diff(&g, x, Axis::Row)));
    Ok([plain, central, band, horizontal, vertical])
}

pub fn dconv(h: &SparseCodeH, w: &DetailEnhanceWeights) -> Result<SparseCodeH> {
    let [mut out, rest @ ..] = dconv_branches(h, w)?;
    for b in &rest {
        out.axpy(1.0, b);
    }
    Ok(out)
}

fn dconv_backward(
    g: &CorrGeom,
    x: &[f64],
    ybar: &[f64],
    w: &DetailEnhanceWeights,
    grads: &mut DetailEnhanceWeights,
) -> Vec<f64> {
    add_into(&mut grads.plain, &corr::weight_grad(g, x, ybar));
    add_into(&mut grads.central, &corr::central_diff_weight_grad(g, x, ybar));
    let mut xbar = corr::adjoint(g, &w.plain, ybar);
    add_into(&mut xbar, &corr::central_diff_adjoint(g, &w.central, ybar));
    for axis in DIFF_AXES {
        let (kw, kg) = match axis {
            Axis::Band => (&w.band, &mut grads.band),
            Axis::Col => (&w.horizontal, &mut grads.horizontal),
            Axis::Row => (&w.vertical, &mut grads.vertical),
        };
        add_into(kg, &corr::weight_grad(g, &diff(g, x, axis), ybar));
        add_into(&mut xbar, &diff_adjoint(g, &corr::adjoint(g, kw, ybar), axis));
    }
    xbar
}

fn check(h: &SparseCodeH, w: &DetailEnhanceWeights) -> Result<()> {
    if h.channels() != w.channels {
        Err(DecscError::shape(format!(
            "code has {} channels, detail weights {}",
            h.channels(),
            w.channels
        )))
    } else {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Net2Cache {
    x: Vec<f64>,
    x1: Vec<f64>,
    a: Vec<f64>,
    gate: Vec<f64>,
}

impl Net2Cache {
    pub fn scalars(&self) -> usize {
        self.x.len() + self.x1.len() + self.a.len() + self.gate.len()
    }
}

pub fn net2_apply(h: &SparseCodeH, w: &DetailEnhanceWeights) -> Result<SparseCodeH> {
    net2_forward_cached(h, w).map(|(o, _)| o)
}

pub fn net2_forward_cached(
    h: &SparseCodeH,
    w: &DetailEnhanceWeights,
) -> Result<(SparseCodeH, Net2Cache)> {
    let mut x1 = dconv(h, w)?;
    x1.axpy(1.0, h);
    let g = geom(h);
    let a = corr::forward(&g, &w.conv_a, x1.data());
    let gate = corr::forward(&g, &w.conv_b, &a);
    let out: Vec<f64> = x1
        .data()
        .iter()
        .zip(&gate)
        .map(|(x, gv)| x + x * gv)
        .collect();
    let cache = Net2Cache {
        x: h.data().to_vec(),
        x1: x1.data().to_vec(),
        a,
        gate,
    };
    let out = SparseCodeH::from_vec(h.channels(), h.height(), h.width(), h.bands(), out)?;
    Ok((out, cache))
}

/// Reverse pass of [`net2_forward_cached`].
pub fn net2_backward(
    cache: &Net2Cache,
    ybar: &SparseCodeH,
    w: &DetailEnhanceWeights,
    grads: &mut DetailEnhanceWeights,
) -> SparseCodeH {
    let g = geom(ybar);
    let yb = ybar.data();
    // y = x1 + x1 ⊙ gate
    let gated: Vec<f64> = yb.iter().zip(&cache.x1).map(|(a, b)| a * b).collect();
    let mut x1bar: Vec<f64> = yb
        .iter()
        .zip(&cache.gate)
        .map(|(a, gv)| a + a * gv)
        .collect();
    add_into(&mut grads.conv_b, &corr::weight_grad(&g, &cache.a, &gated));
    let abar = corr::adjoint(&g, &w.conv_b, &gated);
    add_into(&mut grads.conv_a, &corr::weight_grad(&g, &cache.x1, &abar));
    add_into(&mut x1bar, &corr::adjoint(&g, &w.conv_a, &abar));
    // x1 = x + DConv(x)
    let mut xbar = dconv_backward(&g, &cache.x, &x1bar, w, grads);
    add_into(&mut xbar, &x1bar);
    SparseCodeH::from_vec(ybar.channels(), ybar.height(), ybar.width(), ybar.bands(), xbar)
        .expect("cotangent shape mirrors input")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_code(j: usize, h: usize, w: usize, b: usize, rng: &mut ChaCha8Rng) -> SparseCodeH {
        let n = j * h * w * b;
        SparseCodeH::from_vec(j, h, w, b, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn difference_branches_annihilate_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w = DetailEnhanceWeights::random(2, 1.0, &mut rng).unwrap();
            let c = rng.gen_range(-3.0..3.0);
            let h = SparseCodeH::from_vec(2, 4, 5, 3, vec![c; 120]).unwrap();
            let branches = dconv_branches(&h, &w).unwrap();
            for b in &branches[1..] {
                assert!(b.data().iter().all(|&v| v == 0.0));
            }
            let total = dconv(&h, &w).unwrap();
            assert_eq!(total.data(), branches[0].data());
        }
    }

    #[test]
    fn zero_input_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DetailEnhanceWeights::random(2, 1.0, &mut rng).unwrap();
        let z = SparseCodeH::zeros(2, 4, 4, 3);
        assert!(net2_apply(&z, &w).unwrap().data().iter().all(|&v| v == 0.0));
        let h = rand_code(2, 4, 4, 3, &mut rng);
        let id = net2_apply(&h, &DetailEnhanceWeights::zeros(2)).unwrap();
        assert_eq!(id.data(), h.data());
    }

    #[test]
    fn horizontal_ramp_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DetailEnhanceWeights::random(1, 1.0, &mut rng).unwrap();
        let (hh, ww, bb) = (5, 6, 3);
        let mut data = vec![0.0; hh * ww * bb];
        for z in 0..bb {
            for r in 0..hh {
                for c in 0..ww {
                    data[(z * hh + r) * ww + c] = 0.25 * c as f64;
                }
            }
        }
        let h = SparseCodeH::from_vec(1, hh, ww, bb, data).unwrap();
        let [_, _, band, horizontal, vertical] = dconv_branches(&h, &w).unwrap();
        assert!(vertical.data().iter().all(|&v| v == 0.0));
        assert!(band.data().iter().all(|&v| v == 0.0));
        assert!(horizontal.data().iter().any(|&v| v.abs() > 1e-3));
        // Direct evaluation: the difference field is 0.25 except on the last column.
        let g = geom(&h);
        let mut field = vec![0.0; h.len()];
        for (p, f) in field.iter_mut().enumerate() {
            if p % ww != ww - 1 {
                *f = 0.25;
            }
        }
        let expect = corr::forward(&g, &w.horizontal, &field);
        for (a, b) in horizontal.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn net2_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = DetailEnhanceWeights::random(2, 0.4, &mut rng).unwrap();
        let h = rand_code(2, 4, 5, 3, &mut rng);
        let g = geom(&h);
        let mut x1 = dconv(&h, &w).unwrap();
        x1.axpy(1.0, &h);
        let gate = corr::forward(&g, &w.conv_b, &corr::forward(&g, &w.conv_a, x1.data()));
        let out = net2_apply(&h, &w).unwrap();
        for ((o, x), gv) in out.data().iter().zip(x1.data()).zip(&gate) {
            assert!((o - (x + x * gv)).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DetailEnhanceWeights::random(2, 0.4, &mut rng).unwrap();
        let h = rand_code(2, 3, 4, 3, &mut rng);
        let cot = rand_code(2, 3, 4, 3, &mut rng);
        let loss = |h: &SparseCodeH, w: &DetailEnhanceWeights| -> f64 {
            let o = net2_apply(h, w).unwrap();
            o.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net2_forward_cached(&h, &w).unwrap();
        let mut grads = DetailEnhanceWeights::zeros(2);
        let hbar = net2_backward(&cache, &cot, &w, &mut grads);
        let eps = 1e-6;
        for i in 0..h.len() {
            let mut a = h.clone();
            let mut b = h.clone();
            a.data_mut()[i] += eps;
            b.data_mut()[i] -= eps;
            let fd = (loss(&a, &w) - loss(&b, &w)) / (2.0 * eps);
            assert!((fd - hbar.data()[i]).abs() < 1e-6, "entry {i}");
        }
        for k in 0..7 {
            for i in (0..w.plain.len()).step_by(5) {
                let mut a = w.clone();
                let mut b = w.clone();
                a.kernels_mut()[k][i] += eps;
                b.kernels_mut()[k][i] -= eps;
                let fd = (loss(&h, &a) - loss(&h, &b)) / (2.0 * eps);
                let an = grads.kernels()[k][i];
                assert!((fd - an).abs() < 1e-6, "kernel {k} tap {i}: {fd} vs {an}");
            }
        }
    }
}
