//! Seeded synthetic degradations: band-wise Gaussian noise with random or
//! spectrally correlated strength, and mixtures with impulse, stripe and
//! deadline corruption. Noise levels are in 8-bit units and applied as σ/255.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DecscError, Result};
use crate::par;
use crate::tensor::{Flat, HsiCube};

pub const CORR_BETA: f64 = 23.08;
pub const CORR_ETA: f64 = 0.157;
const MIXTURE_SIGMA_HI: f64 = 95.0;
const GLOBAL_STREAM: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoisePattern {
    NonIid,
    Mixture,
    Corr,
}

impl std::str::FromStr for NoisePattern {
    type Err = DecscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noniid" => Ok(Self::NonIid),
            "mixture" => Ok(Self::Mixture),
            "corr" => Ok(Self::Corr),
            other => Err(DecscError::Config(format!("unknown noise pattern {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub pattern: NoisePattern,
    pub lo: f64,
    pub hi: f64,
    pub beta: f64,
    pub eta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noniid(lo: f64, hi: f64, seed: u64) -> Self {
        Self {
            pattern: NoisePattern::NonIid,
            lo,
            hi,
            beta: CORR_BETA,
            eta: CORR_ETA,
            seed,
        }
    }

    pub fn apply(&self, x: &HsiCube) -> Result<(HsiCube, DegradationReport)> {
        match self.pattern {
            NoisePattern::NonIid => {
                let (y, s) = add_noniid_gaussian(x, self.lo, self.hi, self.seed)?;
                Ok((y, DegradationReport::gaussian_only(&s)))
            }
            NoisePattern::Mixture => add_mixture(x, self.seed),
            NoisePattern::Corr => {
                let (y, s) = add_corr_variance(x, self.beta, self.eta, self.seed)?;
                Ok((y, DegradationReport::gaussian_only(&s)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Extra {
    None,
    Impulse { ratio: f64, pixels: usize },
    Stripe { columns: Vec<usize>, offsets: Vec<f64> },
    Deadline { columns: Vec<usize> },
}

impl Extra {
    pub fn kind(&self) -> &'static str {
        match self {
            Extra::None => "none",
            Extra::Impulse { .. } => "impulse",
            Extra::Stripe { .. } => "stripe",
            Extra::Deadline { .. } => "deadline",
        }
    }

    fn params(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        match self {
            Extra::None => String::new(),
            Extra::Impulse { ratio, pixels } => format!("ratio={ratio:?};pixels={pixels}"),
            Extra::Stripe { columns, offsets } => format!(
                "columns={};offsets={}",
                join(columns),
                offsets.iter().map(|o| format!("{o:?}")).collect::<Vec<_>>().join(" ")
            ),
            Extra::Deadline { columns } => format!("columns={}", join(columns)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandDegradation {
    pub band: usize,
    /// Gaussian σ in 8-bit units.
    pub sigma: f64,
    pub extra: Extra,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DegradationReport {
    pub bands: Vec<BandDegradation>,
}

impl DegradationReport {
    fn gaussian_only(sigmas: &[f64]) -> Self {
        Self {
            bands: sigmas
                .iter()
                .enumerate()
                .map(|(band, &sigma)| BandDegradation {
                    band,
                    sigma,
                    extra: Extra::None,
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,sigma,extra_type,params\n");
        for b in &self.bands {
            let _ = writeln!(out, "{},{:?},{},{}", b.band, b.sigma, b.extra.kind(), b.extra.params());
        }
        out
    }
}

fn band_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
        return Err(DecscError::invalid(format!("noise range [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
    }
    Ok(())
}

/// Clip every entry into [0, 1].
pub fn clip_unit(x: &mut HsiCube) {
    x.clip_unit();
}

/// Adds per-band Gaussian noise with σ_b drawn from `sigma(b, rng)`.
fn gaussian_bands<F>(x: &HsiCube, seed: u64, sigma: F) -> (HsiCube, Vec<f64>)
where
    F: Fn(usize, &mut ChaCha8Rng) -> f64 + Sync,
{
    let mut y = x.clone();
    let plane = x.height() * x.width();
    let sigmas: Vec<f64> = par::map_range(x.bands(), |b| {
        let mut rng = band_rng(seed, 1 + b as u64);
        let s = sigma(b, &mut rng);
        let noise: Vec<f64> = (0..plane)
            .map(|_| s / 255.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (s, noise)
    })
    .into_iter()
    .enumerate()
    .map(|(b, (s, noise))| {
        y.band_mut(b).iter_mut().zip(noise).for_each(|(v, n)| *v += n);
        s
    })
    .collect();
    (y, sigmas)
}

/// Band-wise Gaussian noise with σ_b ~ U[lo, hi]; output clipped to [0, 1].
pub fn add_noniid_gaussian(x: &HsiCube, lo: f64, hi: f64, seed: u64) -> Result<(HsiCube, Vec<f64>)> {
    check_range(lo, hi)?;
    let (mut y, s) = gaussian_bands(x, seed, |_, rng| if lo == hi { lo } else { rng.gen_range(lo..=hi) });
    y.clip_unit();
    Ok((y, s))
}

/// `σ_i = β exp(−(i/c − ½)² / (4η²))` with `c = bands`, 8-bit units.
pub fn corr_sigma_profile(bands: usize, beta: f64, eta: f64) -> Vec<f64> {
    let c = bands as f64;
    (0..bands)
        .map(|i| {
            let t = i as f64 / c - 0.5;
            beta * (-(t * t) / (4.0 * eta * eta)).exp()
        })
        .collect()
}

/// Gaussian noise with the spectrally correlated σ profile; output clipped.
pub fn add_corr_variance(x: &HsiCube, beta: f64, eta: f64, seed: u64) -> Result<(HsiCube, Vec<f64>)> {
    if !(beta > 0.0 && eta > 0.0) {
        return Err(DecscError::invalid("beta and eta must be positive"));
    }
    let profile = corr_sigma_profile(x.bands(), beta, eta);
    let (mut y, s) = gaussian_bands(x, seed, |b, _| profile[b]);
    y.clip_unit();
    Ok((y, s))
}

/// Salt-and-pepper: each pixel independently with probability `ratio` is set
/// to 0 or 1 with equal odds. Returns the number of pixels hit.
pub fn impulse_band<R: Rng>(band: &mut [f64], ratio: f64, rng: &mut R) -> usize {
    let mut hit = 0;
    for v in band.iter_mut() {
        if rng.gen::<f64>() < ratio {
            *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            hit += 1;
        }
    }
    hit
}

fn pick_columns<R: Rng>(width: usize, rng: &mut R) -> Vec<usize> {
    let frac = rng.gen_range(0.05..=0.15);
    let k = ((frac * width as f64).round() as usize).clamp(1, width);
    let mut cols: Vec<usize> = (0..width).collect();
    cols.shuffle(rng);
    let mut picked = cols[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Gaussian σ ∈ U[0, 95] on every band, then one extra corruption per band:
/// the bands are randomly split into thirds receiving impulse, stripe and
/// deadline corruption respectively. Output clipped to [0, 1].
pub fn add_mixture(x: &HsiCube, seed: u64) -> Result<(HsiCube, DegradationReport)> {
    let bands = x.bands();
    if bands < 3 {
        return Err(DecscError::invalid("mixture noise needs at least 3 bands"));
    }
    let (mut y, sigmas) = gaussian_bands(x, seed, |_, rng| rng.gen_range(0.0..=MIXTURE_SIGMA_HI));
    let mut order: Vec<usize> = (0..bands).collect();
    order.shuffle(&mut band_rng(seed, GLOBAL_STREAM));
    let mut kind = vec![0usize; bands];
    for (pos, &b) in order.iter().enumerate() {
        kind[b] = pos * 3 / bands;
    }
    let (h, w) = (x.height(), x.width());
    let mut report = DegradationReport::default();
    for b in 0..bands {
        let mut rng = band_rng(seed, 1 + (bands + b) as u64);
        let data = y.band_mut(b);
        let extra = match kind[b] {
            0 => {
                let ratio = rng.gen_range(0.1..=0.7);
                let pixels = impulse_band(data, ratio, &mut rng);
                Extra::Impulse { ratio, pixels }
            }
            1 => {
                let columns = pick_columns(w, &mut rng);
                let offsets: Vec<f64> = columns.iter().map(|_| rng.gen_range(-0.25..=0.25)).collect();
                for (&c, &o) in columns.iter().zip(&offsets) {
                    for r in 0..h {
                        data[r * w + c] += o;
                    }
                }
                Extra::Stripe { columns, offsets }
            }
            _ => {
                let columns = pick_columns(w, &mut rng);
                for &c in &columns {
                    for r in 0..h {
                        data[r * w + c] = 0.0;
                    }
                }
                Extra::Deadline { columns }
            }
        };
        report.bands.push(BandDegradation {
            band: b,
            sigma: sigmas[b],
            extra,
        });
    }
    y.clip_unit();
    debug_assert!(y.is_finite());
    Ok((y, report))
}
