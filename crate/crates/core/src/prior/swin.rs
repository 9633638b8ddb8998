//! Stacked window-attention stages applied to the shared code `S`.
//!
//! Stages run at constant resolution with a residual connection each. Odd
//! stages use windows cyclically shifted by `w/2`. Spatial dims are
//! reflect-padded up to multiples of the window and cropped afterwards.

use rand::Rng;

use super::attention::{
    add_into, window_msa_backward, window_msa_cached, AttentionStageWeights, WindowCache,
};
use crate::error::{DecscError, Result};
use crate::par;
use crate::tensor::{Flat, SparseCodeS};

#[derive(Clone, Debug, PartialEq)]
pub struct Net1Weights {
    pub window: usize,
    pub stages: Vec<AttentionStageWeights>,
}

impl Net1Weights {
    pub fn zeros(dim: usize, heads: usize, window: usize, stages: usize) -> Result<Self> {
        if window == 0 {
            return Err(DecscError::invalid("window size must be positive"));
        }
        let stage = AttentionStageWeights::zeros(dim, heads)?;
        Ok(Self {
            window,
            stages: vec![stage; stages],
        })
    }

    pub fn random<R: Rng>(
        dim: usize,
        heads: usize,
        window: usize,
        stages: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = Self::zeros(dim, heads, window, stages)?;
        for s in &mut w.stages {
            *s = AttentionStageWeights::random(dim, heads, std, rng)?;
        }
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.stages.first().map_or(0, |s| s.dim)
    }
}

/// Index into `0..n` for a possibly out-of-range `i`, mirrored without edge repeat.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

#[derive(Clone, Copy, Debug)]
struct Grid {
    height: usize,
    width: usize,
    padded_h: usize,
    padded_w: usize,
    dim: usize,
}

impl Grid {
    fn new(s: &SparseCodeS, window: usize) -> Self {
        let up = |n: usize| n.div_ceil(window) * window;
        Self {
            height: s.height(),
            width: s.width(),
            padded_h: up(s.height()),
            padded_w: up(s.width()),
            dim: s.channels(),
        }
    }

    fn pixels(&self) -> usize {
        self.padded_h * self.padded_w
    }

    fn pad(&self, s: &SparseCodeS) -> Vec<f64> {
        let mut g = vec![0.0; self.pixels() * self.dim];
        for y in 0..self.padded_h {
            let sy = reflect(y, self.height);
            for x in 0..self.padded_w {
                let sx = reflect(x, self.width);
                let cell = &mut g[(y * self.padded_w + x) * self.dim..][..self.dim];
                for (c, v) in cell.iter_mut().enumerate() {
                    *v = s.channel(c)[sy * self.width + sx];
                }
            }
        }
        g
    }

    /// Adjoint of [`Grid::pad`]: padded cells fold back onto their sources.
    fn pad_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.dim * plane];
        for y in 0..self.padded_h {
            let sy = reflect(y, self.height);
            for x in 0..self.padded_w {
                let sx = reflect(x, self.width);
                let cell = &g[(y * self.padded_w + x) * self.dim..][..self.dim];
                for (c, v) in cell.iter().enumerate() {
                    out[c * plane + sy * self.width + sx] += v;
                }
            }
        }
        out
    }

    fn crop(&self, g: &[f64]) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.dim * plane];
        for y in 0..self.height {
            for x in 0..self.width {
                let cell = &g[(y * self.padded_w + x) * self.dim..][..self.dim];
                for (c, v) in cell.iter().enumerate() {
                    out[c * plane + y * self.width + x] = *v;
                }
            }
        }
        out
    }

    fn crop_adjoint(&self, sbar: &[f64]) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut g = vec![0.0; self.pixels() * self.dim];
        for y in 0..self.height {
            for x in 0..self.width {
                let cell = &mut g[(y * self.padded_w + x) * self.dim..][..self.dim];
                for (c, v) in cell.iter_mut().enumerate() {
                    *v = sbar[c * plane + y * self.width + x];
                }
            }
        }
        g
    }

    /// Pixel offsets (into the token grid) of every token of every window.
    fn window_pixels(&self, window: usize, shift: usize) -> Vec<Vec<usize>> {
        let (nwy, nwx) = (self.padded_h / window, self.padded_w / window);
        let mut out = Vec::with_capacity(nwy * nwx);
        for wy in 0..nwy {
            for wx in 0..nwx {
                let mut px = Vec::with_capacity(window * window);
                for ty in 0..window {
                    for tx in 0..window {
                        let y = (wy * window + ty + shift) % self.padded_h;
                        let x = (wx * window + tx + shift) % self.padded_w;
                        px.push(y * self.padded_w + x);
                    }
                }
                out.push(px);
            }
        }
        out
    }

    fn gather(&self, g: &[f64], pixels: &[usize]) -> Vec<f64> {
        let mut t = Vec::with_capacity(pixels.len() * self.dim);
        for &p in pixels {
            t.extend_from_slice(&g[p * self.dim..(p + 1) * self.dim]);
        }
        t
    }

    fn scatter_add(&self, g: &mut [f64], pixels: &[usize], tokens: &[f64]) {
        for (t, &p) in pixels.iter().enumerate() {
            add_into(
                &mut g[p * self.dim..(p + 1) * self.dim],
                &tokens[t * self.dim..(t + 1) * self.dim],
            );
        }
    }
}

#[derive(Clone, Debug)]
pub struct Net1Cache {
    grid: Grid,
    stages: Vec<Vec<WindowCache>>,
}

impl Net1Cache {
    pub fn scalars(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| s.iter().map(WindowCache::scalars))
            .sum()
    }
}

fn stage_shift(stage: usize, window: usize) -> usize {
    if stage % 2 == 1 {
        window / 2
    } else {
        0
    }
}

pub fn net1_apply(s: &SparseCodeS, w: &Net1Weights) -> Result<SparseCodeS> {
    net1_forward_cached(s, w).map(|(out, _)| out)
}

pub fn net1_forward_cached(s: &SparseCodeS, w: &Net1Weights) -> Result<(SparseCodeS, Net1Cache)> {
    if !w.stages.is_empty() && s.channels() != w.dim() {
        return Err(DecscError::shape(format!(
            "code has {} channels, attention token dim {}",
            s.channels(),
            w.dim()
        )));
    }
    let grid = Grid::new(s, w.window);
    let n = w.window * w.window;
    let mut g = grid.pad(s);
    let mut caches = Vec::with_capacity(w.stages.len());
    for (si, stage) in w.stages.iter().enumerate() {
        let windows = grid.window_pixels(w.window, stage_shift(si, w.window));
        let results: Vec<Result<(Vec<f64>, WindowCache)>> = par::map_range(windows.len(), |i| {
            window_msa_cached(&grid.gather(&g, &windows[i]), n, stage)
        });
        let mut next = g.clone();
        let mut stage_cache = Vec::with_capacity(windows.len());
        for (px, r) in windows.iter().zip(results) {
            let (z, cache) = r?;
            grid.scatter_add(&mut next, px, &z);
            stage_cache.push(cache);
        }
        g = next;
        caches.push(stage_cache);
    }
    let out = SparseCodeS::from_vec(s.channels(), s.height(), s.width(), grid.crop(&g))?;
    Ok((
        out,
        Net1Cache {
            grid,
            stages: caches,
        },
    ))
}

/// Reverse pass of [`net1_forward_cached`]. Accumulates into `grads` and
/// returns the input cotangent.
pub fn net1_backward(
    cache: &Net1Cache,
    sbar: &SparseCodeS,
    w: &Net1Weights,
    grads: &mut Net1Weights,
) -> SparseCodeS {
    let grid = cache.grid;
    let n = w.window * w.window;
    let mut gb = grid.crop_adjoint(sbar.data());
    for (si, stage) in w.stages.iter().enumerate().rev() {
        let windows = grid.window_pixels(w.window, stage_shift(si, w.window));
        let stage_cache = &cache.stages[si];
        let results: Vec<(Vec<f64>, AttentionStageWeights)> = par::map_range(windows.len(), |i| {
            let zbar = grid.gather(&gb, &windows[i]);
            let mut g = AttentionStageWeights::zeros(stage.dim, stage.heads)
                .expect("stage weights already validated");
            let pbar = window_msa_backward(&stage_cache[i], &zbar, n, stage, &mut g);
            (pbar, g)
        });
        let mut next = gb.clone();
        let sg = &mut grads.stages[si];
        for (px, (pbar, g)) in windows.iter().zip(results) {
            grid.scatter_add(&mut next, px, &pbar);
            add_into(&mut sg.wq, &g.wq);
            add_into(&mut sg.wk, &g.wk);
            add_into(&mut sg.wv, &g.wv);
            add_into(&mut sg.wo, &g.wo);
        }
        gb = next;
    }
    SparseCodeS::from_vec(sbar.channels(), sbar.height(), sbar.width(), grid.pad_adjoint(&gb))
        .expect("cotangent shape mirrors input")
}
