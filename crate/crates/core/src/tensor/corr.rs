//! Multi-channel 3-D cross-correlation with zero "same" padding.
//!
//! This is the single kernel engine behind every convolution in the crate:
//! the shared 2-D band dictionary is the `depth = 1` case, the 3-D dictionary
//! is `cout = 1`, and the detail-enhancement convolutions map `J -> J`
//! channels. Layouts are channel-outermost, then depth, height, width:
//!
//! * input  `x`: `cin  x depth x height x width`
//! * output `y`: `cout x depth x height x width`
//! * weights `w`: `cout x cin x kd x kh x kw`

use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrGeom {
    pub cin: usize,
    pub cout: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl CorrGeom {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn volume(&self) -> usize {
        self.depth * self.plane()
    }

    pub fn taps(&self) -> usize {
        self.kd * self.kh * self.kw
    }

    pub fn input_len(&self) -> usize {
        self.cin * self.volume()
    }

    pub fn output_len(&self) -> usize {
        self.cout * self.volume()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    fn pads(&self) -> (isize, isize, isize) {
        (
            (self.kd / 2) as isize,
            (self.kh / 2) as isize,
            (self.kw / 2) as isize,
        )
    }

    fn weight_index(&self, o: usize, i: usize) -> usize {
        (o * self.cin + i) * self.taps()
    }
}

/// `dst[r, c] += coef * src[r + dy, c + dx]` over the in-bounds region.
#[inline]
pub(crate) fn shifted_axpy(
    dst: &mut [f64],
    src: &[f64],
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
    coef: f64,
) {
    let (r0, r1) = valid_range(height, dy);
    let (c0, c1) = valid_range(width, dx);
    if r0 >= r1 || c0 >= c1 {
        return;
    }
    for r in r0..r1 {
        let sr = (r as isize + dy) as usize;
        let d = &mut dst[r * width + c0..r * width + c1];
        let s0 = (sr * width) as isize + c0 as isize + dx;
        let s = &src[s0 as usize..s0 as usize + (c1 - c0)];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += coef * sv;
        }
    }
}

/// `sum_{r,c} a[r, c] * b[r + dy, c + dx]` over the in-bounds region.
#[inline]
pub(crate) fn shifted_dot(
    a: &[f64],
    b: &[f64],
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
) -> f64 {
    let (r0, r1) = valid_range(height, dy);
    let (c0, c1) = valid_range(width, dx);
    let mut acc = 0.0;
    if r0 >= r1 || c0 >= c1 {
        return acc;
    }
    for r in r0..r1 {
        let sr = (r as isize + dy) as usize;
        let av = &a[r * width + c0..r * width + c1];
        let s0 = (sr * width) as isize + c0 as isize + dx;
        let bv = &b[s0 as usize..s0 as usize + (c1 - c0)];
        let mut row = 0.0;
        for (x, y) in av.iter().zip(bv) {
            row += x * y;
        }
        acc += row;
    }
    acc
}

/// Indices `r` in `0..n` with `r + shift` also in `0..n`.
#[inline]
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).clamp(0, n as isize) as usize;
    (lo.min(n), hi)
}

/// `y = w ⋆ x`.
pub fn forward(g: &CorrGeom, w: &[f64], x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), g.weight_len());
    debug_assert_eq!(x.len(), g.input_len());
    let plane = g.plane();
    let (pd, ph, pw) = g.pads();
    let mut y = vec![0.0; g.output_len()];
    par::for_each_chunk_mut(&mut y, plane, |idx, out| {
        let o = idx / g.depth;
        let z = (idx % g.depth) as isize;
        for i in 0..g.cin {
            let wbase = g.weight_index(o, i);
            for a in 0..g.kd {
                let zz = z + a as isize - pd;
                if zz < 0 || zz >= g.depth as isize {
                    continue;
                }
                let src = &x[(i * g.depth + zz as usize) * plane..][..plane];
                for b in 0..g.kh {
                    for e in 0..g.kw {
                        let coef = w[wbase + (a * g.kh + b) * g.kw + e];
                        shifted_axpy(
                            out,
                            src,
                            g.height,
                            g.width,
                            b as isize - ph,
                            e as isize - pw,
                            coef,
                        );
                    }
                }
            }
        }
    });
    y
}

/// Exact adjoint of [`forward`] in its input argument: `x̄ = wᵀ ⋆ ȳ`.
pub fn adjoint(g: &CorrGeom, w: &[f64], ybar: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), g.weight_len());
    debug_assert_eq!(ybar.len(), g.output_len());
    let plane = g.plane();
    let (pd, ph, pw) = g.pads();
    let mut xbar = vec![0.0; g.input_len()];
    par::for_each_chunk_mut(&mut xbar, plane, |idx, out| {
        let i = idx / g.depth;
        let z = (idx % g.depth) as isize;
        for o in 0..g.cout {
            let wbase = g.weight_index(o, i);
            for a in 0..g.kd {
                let zz = z - a as isize + pd;
                if zz < 0 || zz >= g.depth as isize {
                    continue;
                }
                let src = &ybar[(o * g.depth + zz as usize) * plane..][..plane];
                for b in 0..g.kh {
                    for e in 0..g.kw {
                        let coef = w[wbase + (a * g.kh + b) * g.kw + e];
                        shifted_axpy(
                            out,
                            src,
                            g.height,
                            g.width,
                            ph - b as isize,
                            pw - e as isize,
                            coef,
                        );
                    }
                }
            }
        }
    });
    xbar
}

/// Gradient of `<ȳ, w ⋆ x>` with respect to `w`.
pub fn weight_grad(g: &CorrGeom, x: &[f64], ybar: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), g.input_len());
    debug_assert_eq!(ybar.len(), g.output_len());
    let plane = g.plane();
    let (pd, ph, pw) = g.pads();
    let mut wbar = vec![0.0; g.weight_len()];
    par::for_each_chunk_mut(&mut wbar, g.taps(), |idx, out| {
        let o = idx / g.cin;
        let i = idx % g.cin;
        for a in 0..g.kd {
            for b in 0..g.kh {
                for e in 0..g.kw {
                    let mut acc = 0.0;
                    for z in 0..g.depth {
                        let zz = z as isize + a as isize - pd;
                        if zz < 0 || zz >= g.depth as isize {
                            continue;
                        }
                        let yp = &ybar[(o * g.depth + z) * plane..][..plane];
                        let xp = &x[(i * g.depth + zz as usize) * plane..][..plane];
                        acc += shifted_dot(
                            yp,
                            xp,
                            g.height,
                            g.width,
                            b as isize - ph,
                            e as isize - pw,
                        );
                    }
                    out[(a * g.kh + b) * g.kw + e] = acc;
                }
            }
        }
    });
    wbar
}

/// Central-difference correlation: `y_o(p) = Σ_i Σ_off w[o,i,off] (x_i(p+off) - x_i(p))`
/// over in-bounds offsets only. Constant inputs give exactly zero.
pub fn central_diff_forward(g: &CorrGeom, w: &[f64], x: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let (pd, ph, pw) = g.pads();
    let mut y = vec![0.0; g.output_len()];
    par::for_each_chunk_mut(&mut y, plane, |idx, out| {
        let o = idx / g.depth;
        let z = idx % g.depth;
        for i in 0..g.cin {
            let wbase = g.weight_index(o, i);
            let center = &x[(i * g.depth + z) * plane..][..plane];
            for a in 0..g.kd {
                let zz = z as isize + a as isize - pd;
                if zz < 0 || zz >= g.depth as isize {
                    continue;
                }
                let src = &x[(i * g.depth + zz as usize) * plane..][..plane];
                for b in 0..g.kh {
                    for e in 0..g.kw {
                        let coef = w[wbase + (a * g.kh + b) * g.kw + e];
                        shifted_diff_axpy(
                            out,
                            src,
                            center,
                            g.height,
                            g.width,
                            b as isize - ph,
                            e as isize - pw,
                            coef,
                        );
                    }
                }
            }
        }
    });
    y
}

/// Adjoint of [`central_diff_forward`] in `x`.
pub fn central_diff_adjoint(g: &CorrGeom, w: &[f64], ybar: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let (pd, ph, pw) = g.pads();
    let mut xbar = adjoint(g, w, ybar);
    par::for_each_chunk_mut(&mut xbar, plane, |idx, out| {
        let i = idx / g.depth;
        let z = idx % g.depth;
        for o in 0..g.cout {
            let wbase = g.weight_index(o, i);
            let yc = &ybar[(o * g.depth + z) * plane..][..plane];
            for a in 0..g.kd {
                let zz = z as isize + a as isize - pd;
                if zz < 0 || zz >= g.depth as isize {
                    continue;
                }
                for b in 0..g.kh {
                    for e in 0..g.kw {
                        let coef = w[wbase + (a * g.kh + b) * g.kw + e];
                        masked_axpy(
                            out,
                            yc,
                            g.height,
                            g.width,
                            b as isize - ph,
                            e as isize - pw,
                            -coef,
                        );
                    }
                }
            }
        }
    });
    xbar
}

/// Gradient of `<ȳ, central_diff_forward(w, x)>` with respect to `w`.
pub fn central_diff_weight_grad(g: &CorrGeom, x: &[f64], ybar: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let (pd, ph, pw) = g.pads();
    let mut wbar = vec![0.0; g.weight_len()];
    par::for_each_chunk_mut(&mut wbar, g.taps(), |idx, out| {
        let o = idx / g.cin;
        let i = idx % g.cin;
        for a in 0..g.kd {
            for b in 0..g.kh {
                for e in 0..g.kw {
                    let (dy, dx) = (b as isize - ph, e as isize - pw);
                    let mut acc = 0.0;
                    for z in 0..g.depth {
                        let zz = z as isize + a as isize - pd;
                        if zz < 0 || zz >= g.depth as isize {
                            continue;
                        }
                        let yp = &ybar[(o * g.depth + z) * plane..][..plane];
                        let xs = &x[(i * g.depth + zz as usize) * plane..][..plane];
                        let xc = &x[(i * g.depth + z) * plane..][..plane];
                        acc += shifted_dot(yp, xs, g.height, g.width, dy, dx)
                            - masked_dot(yp, xc, g.height, g.width, dy, dx);
                    }
                    out[(a * g.kh + b) * g.kw + e] = acc;
                }
            }
        }
    });
    wbar
}

/// `dst[r, c] += coef * (src[r + dy, c + dx] - center[r, c])` over the in-bounds region.
#[allow(clippy::too_many_arguments)]
#[inline]
fn shifted_diff_axpy(
    dst: &mut [f64],
    src: &[f64],
    center: &[f64],
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
    coef: f64,
) {
    let (r0, r1) = valid_range(height, dy);
    let (c0, c1) = valid_range(width, dx);
    if r0 >= r1 || c0 >= c1 {
        return;
    }
    for r in r0..r1 {
        let sr = (r as isize + dy) as usize;
        let d = &mut dst[r * width + c0..r * width + c1];
        let cv = &center[r * width + c0..r * width + c1];
        let s0 = ((sr * width) as isize + c0 as isize + dx) as usize;
        let s = &src[s0..s0 + (c1 - c0)];
        for ((dv, sv), cc) in d.iter_mut().zip(s).zip(cv) {
            *dv += coef * (sv - cc);
        }
    }
}

/// `dst[r, c] += coef * src[r, c]` where `(r + dy, c + dx)` is in bounds.
#[inline]
fn masked_axpy(
    dst: &mut [f64],
    src: &[f64],
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
    coef: f64,
) {
    let (r0, r1) = valid_range(height, dy);
    let (c0, c1) = valid_range(width, dx);
    for r in r0..r1 {
        let range = r * width + c0..r * width + c1;
        for (d, s) in dst[range.clone()].iter_mut().zip(&src[range]) {
            *d += coef * s;
        }
    }
}

#[inline]
fn masked_dot(a: &[f64], b: &[f64], height: usize, width: usize, dy: isize, dx: isize) -> f64 {
    let (r0, r1) = valid_range(height, dy);
    let (c0, c1) = valid_range(width, dx);
    let mut acc = 0.0;
    for r in r0..r1 {
        let range = r * width + c0..r * width + c1;
        acc += a[range.clone()]
            .iter()
            .zip(&b[range])
            .map(|(x, y)| x * y)
            .sum::<f64>();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(g: &CorrGeom, w: &[f64], x: &[f64]) -> Vec<f64> {
        let (pd, ph, pw) = g.pads();
        let mut y = vec![0.0; g.output_len()];
        for o in 0..g.cout {
            for z in 0..g.depth {
                for r in 0..g.height {
                    for c in 0..g.width {
                        let mut acc = 0.0;
                        for i in 0..g.cin {
                            for a in 0..g.kd {
                                for b in 0..g.kh {
                                    for e in 0..g.kw {
                                        let zz = z as isize + a as isize - pd;
                                        let rr = r as isize + b as isize - ph;
                                        let cc = c as isize + e as isize - pw;
                                        if zz < 0
                                            || rr < 0
                                            || cc < 0
                                            || zz >= g.depth as isize
                                            || rr >= g.height as isize
                                            || cc >= g.width as isize
                                        {
                                            continue;
                                        }
                                        let wi = g.weight_index(o, i) + (a * g.kh + b) * g.kw + e;
                                        let xi = ((i * g.depth + zz as usize) * g.height
                                            + rr as usize)
                                            * g.width
                                            + cc as usize;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        y[((o * g.depth + z) * g.height + r) * g.width + c] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn kernel_wider_than_plane() {
        let g = CorrGeom {
            cin: 2,
            cout: 3,
            depth: 2,
            height: 2,
            width: 3,
            kd: 3,
            kh: 5,
            kw: 7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = forward(&g, &w, &x);
        let slow = brute(&g, &w, &x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn weight_grad_matches_inner_product_derivative() {
        let g = CorrGeom {
            cin: 2,
            cout: 2,
            depth: 3,
            height: 4,
            width: 5,
            kd: 3,
            kh: 3,
            kw: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ybar: Vec<f64> = (0..g.output_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = weight_grad(&g, &x, &ybar);
        // <ȳ, w ⋆ x> is linear in w, so the gradient entry k is the response to e_k.
        for k in (0..g.weight_len()).step_by(7) {
            let mut e = vec![0.0; g.weight_len()];
            e[k] = 1.0;
            let y = brute(&g, &e, &x);
            let expect: f64 = y.iter().zip(&ybar).map(|(a, b)| a * b).sum();
            assert!((grad[k] - expect).abs() <= 1e-12, "tap {k}");
        }
    }

    #[test]
    fn central_diff_adjoint_and_weight_grad() {
        let g = CorrGeom {
            cin: 2,
            cout: 3,
            depth: 3,
            height: 4,
            width: 5,
            kd: 3,
            kh: 3,
            kw: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..g.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ybar: Vec<f64> = (0..g.output_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = central_diff_forward(&g, &w, &x);
        let lhs: f64 = y.iter().zip(&ybar).map(|(a, b)| a * b).sum();
        let xbar = central_diff_adjoint(&g, &w, &ybar);
        let rhs: f64 = x.iter().zip(&xbar).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        let wbar = central_diff_weight_grad(&g, &x, &ybar);
        let via_w: f64 = w.iter().zip(&wbar).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}
