//! Window multi-head self-attention on `n x d` token matrices.
//!
//! Tokens are rows. Per head `i` the projections are the column blocks
//! `[i*dh, (i+1)*dh)` of the `d x d` matrices `wq`, `wk`, `wv`; heads are
//! concatenated and multiplied by `wo`. There is no positional term, no
//! mask and no feed-forward sublayer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure_finite, DecscError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStageWeights {
    pub dim: usize,
    pub heads: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl AttentionStageWeights {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(DecscError::invalid(format!(
                "token dim {dim} not divisible into {heads} heads"
            )));
        }
        let z = vec![0.0; dim * dim];
        Ok(Self {
            dim,
            heads,
            wq: z.clone(),
            wk: z.clone(),
            wv: z.clone(),
            wo: z,
        })
    }

    pub fn random<R: Rng>(dim: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(dim, heads)?;
        let normal = Normal::new(0.0, std).map_err(|e| DecscError::invalid(e.to_string()))?;
        for m in [&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo] {
            m.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        Ok(w)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// `a (n x k) * b (k x m)`
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ (k x n)ᵀ * b (n x m)`, with `a` stored `n x k`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &mut out[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * bᵀ`, with `b` stored `m x k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Intermediates of one window evaluation.
#[derive(Clone, Debug)]
pub struct WindowCache {
    pub tokens: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Row-stochastic attention matrices, `heads x n x n`.
    pub attn: Vec<f64>,
    concat: Vec<f64>,
}

impl WindowCache {
    pub fn scalars(&self) -> usize {
        self.tokens.len() + self.q.len() + self.k.len() + self.v.len() + self.attn.len() + self.concat.len()
    }
}

pub fn window_msa(tokens: &[f64], n: usize, w: &AttentionStageWeights) -> Result<Vec<f64>> {
    window_msa_cached(tokens, n, w).map(|(z, _)| z)
}

pub fn window_msa_cached(
    tokens: &[f64],
    n: usize,
    w: &AttentionStageWeights,
) -> Result<(Vec<f64>, WindowCache)> {
    let d = w.dim;
    if tokens.len() != n * d {
        return Err(DecscError::shape(format!(
            "window holds {} values, expected {n} tokens of dim {d}",
            tokens.len()
        )));
    }
    let dh = w.head_dim();
    let q = matmul(tokens, &w.wq, n, d, d);
    let k = matmul(tokens, &w.wk, n, d, d);
    let v = matmul(tokens, &w.wv, n, d, d);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = vec![0.0; w.heads * n * n];
    let mut concat = vec![0.0; n * d];
    for hd in 0..w.heads {
        let off = hd * dh;
        let a = &mut attn[hd * n * n..(hd + 1) * n * n];
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut a[i * n..(i + 1) * n];
            for j in 0..n {
                let kj = &k[j * d + off..j * d + off + dh];
                row[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
            }
            softmax_in_place(row);
        }
        for i in 0..n {
            for j in 0..n {
                let aij = a[i * n + j];
                let vj = &v[j * d + off..j * d + off + dh];
                let out = &mut concat[i * d + off..i * d + off + dh];
                for (o, vv) in out.iter_mut().zip(vj) {
                    *o += aij * vv;
                }
            }
        }
    }
    ensure_finite(&attn, "attention logits")?;
    let z = matmul(&concat, &w.wo, n, d, d);
    Ok((
        z,
        WindowCache {
            tokens: tokens.to_vec(),
            q,
            k,
            v,
            attn,
            concat,
        },
    ))
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradients of one window; `grads` receives parameter cotangents, the
/// return value is the token cotangent.
pub fn window_msa_backward(
    cache: &WindowCache,
    zbar: &[f64],
    n: usize,
    w: &AttentionStageWeights,
    grads: &mut AttentionStageWeights,
) -> Vec<f64> {
    let d = w.dim;
    let dh = w.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    add_into(&mut grads.wo, &matmul_tn(&cache.concat, zbar, n, d, d));
    let cbar = matmul_nt(zbar, &w.wo, n, d, d);

    let mut qbar = vec![0.0; n * d];
    let mut kbar = vec![0.0; n * d];
    let mut vbar = vec![0.0; n * d];
    let mut abar = vec![0.0; n * n];
    for hd in 0..w.heads {
        let off = hd * dh;
        let a = &cache.attn[hd * n * n..(hd + 1) * n * n];
        for i in 0..n {
            let ci = &cbar[i * d + off..i * d + off + dh];
            for j in 0..n {
                let vj = &cache.v[j * d + off..j * d + off + dh];
                abar[i * n + j] = ci.iter().zip(vj).map(|(x, y)| x * y).sum();
                let aij = a[i * n + j];
                for (vb, c) in vbar[j * d + off..j * d + off + dh].iter_mut().zip(ci) {
                    *vb += aij * c;
                }
            }
        }
        // Softmax backward, then through the scaled logits.
        for i in 0..n {
            let ar = &a[i * n..(i + 1) * n];
            let br = &abar[i * n..(i + 1) * n];
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            for j in 0..n {
                let g = ar[j] * (br[j] - dot) * scale;
                for c in 0..dh {
                    qbar[i * d + off + c] += g * cache.k[j * d + off + c];
                    kbar[j * d + off + c] += g * cache.q[i * d + off + c];
                }
            }
        }
    }
    add_into(&mut grads.wq, &matmul_tn(&cache.tokens, &qbar, n, d, d));
    add_into(&mut grads.wk, &matmul_tn(&cache.tokens, &kbar, n, d, d));
    add_into(&mut grads.wv, &matmul_tn(&cache.tokens, &vbar, n, d, d));

    let mut pbar = matmul_nt(&qbar, &w.wq, n, d, d);
    add_into(&mut pbar, &matmul_nt(&kbar, &w.wk, n, d, d));
    add_into(&mut pbar, &matmul_nt(&vbar, &w.wv, n, d, d));
    pbar
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
