//! Smooth random clean cubes: superpositions of low-frequency spatial
//! patterns, each carrying a smooth spectral envelope.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DecscError, Result};
use crate::noise::add_noniid_gaussian;
use crate::tensor::HsiCube;

const PATTERNS: usize = 6;
/// Cycles across the image along each axis, at most.
const MAX_FREQ: f64 = 3.0;

/// Cube `index` of the stream identified by `seed`; values span [0.05, 0.95].
pub fn synthetic_cube(h: usize, w: usize, b: usize, seed: u64, index: u64) -> Result<HsiCube> {
    if h == 0 || w == 0 || b == 0 {
        return Err(DecscError::invalid("synthetic cube dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut x = HsiCube::zeros(h, w, b);
    for _ in 0..PATTERNS {
        let fy = rng.gen_range(0.0..MAX_FREQ);
        let fx = rng.gen_range(0.0..MAX_FREQ);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.2..1.0);
        let mu = rng.gen_range(0.0..1.0);
        let width = rng.gen_range(0.2..0.6);
        let spatial: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                0.5 + 0.5 * (2.0 * PI * (fy * r / h as f64 + fx * c / w as f64) + phase).cos()
            })
            .collect();
        for band in 0..b {
            let lam = if b == 1 { 0.5 } else { band as f64 / (b - 1) as f64 };
            let env = amp * (-(lam - mu).powi(2) / (2.0 * width * width)).exp();
            x.band_mut(band).iter_mut().zip(&spatial).for_each(|(v, s)| *v += env * s);
        }
    }
    let data = x.into_vec();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    HsiCube::from_vec(h, w, b, data.into_iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect())
}

pub fn synthetic_set(count: usize, h: usize, w: usize, b: usize, seed: u64) -> Result<Vec<HsiCube>> {
    (0..count as u64).map(|i| synthetic_cube(h, w, b, seed, i)).collect()
}

/// `(Y, X)` pairs with band-wise Gaussian noise σ ~ U[lo, hi]; cube `i` uses
/// noise seed `noise_seed + i`.
pub fn noisy_pairs(clean: &[HsiCube], lo: f64, hi: f64, noise_seed: u64) -> Result<Vec<(HsiCube, HsiCube)>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, x)| Ok((add_noniid_gaussian(x, lo, hi, noise_seed.wrapping_add(i as u64))?.0, x.clone())))
        .collect()
}

pub const TOY_SIZE: usize = 32;
pub const TOY_BANDS: usize = 8;
pub const TOY_TRAIN: usize = 8;
pub const TOY_TEST: usize = 4;
pub const TOY_SIGMA_HI: f64 = 55.0;

/// Desk-scale suite: 8 training cubes from seed 0 and 4 held-out cubes from
/// seed 1, all 32x32x8 under σ ∈ [0, 55].
pub fn toy_suite() -> Result<(Vec<(HsiCube, HsiCube)>, Vec<(HsiCube, HsiCube)>)> {
    let train = synthetic_set(TOY_TRAIN, TOY_SIZE, TOY_SIZE, TOY_BANDS, 0)?;
    let test = synthetic_set(TOY_TEST, TOY_SIZE, TOY_SIZE, TOY_BANDS, 1)?;
    Ok((
        noisy_pairs(&train, 0.0, TOY_SIGMA_HI, 100)?,
        noisy_pairs(&test, 0.0, TOY_SIGMA_HI, 200)?,
    ))
}
