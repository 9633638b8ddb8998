//! Image quality metrics: band-mean PSNR, Gaussian-window SSIM and spectral angle.

use std::fmt::Write as _;

use crate::error::{DecscError, Result};
use crate::par;
use crate::tensor::{Flat, HsiCube};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 1e-4;
const C2: f64 = 9e-4;
const SAM_EPS: f64 = 1e-12;

fn check(a: &HsiCube, b: &HsiCube) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(DecscError::shape(format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

/// Band-mean PSNR. Identical bands have infinite PSNR; they are left out of
/// the mean and counted in `infinite_bands`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub infinite_bands: usize,
}

impl Psnr {
    pub fn is_flagged(&self) -> bool {
        self.infinite_bands > 0
    }
}

/// `10 log10(1 / MSE_b)` per band at unit data range.
pub fn psnr_per_band(est: &HsiCube, reference: &HsiCube) -> Result<Vec<f64>> {
    check(est, reference)?;
    Ok(par::map_range(est.bands(), |b| {
        let mse = est
            .band(b)
            .iter()
            .zip(reference.band(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / (est.height() * est.width()) as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }))
}

pub fn psnr(est: &HsiCube, reference: &HsiCube) -> Result<Psnr> {
    let bands = psnr_per_band(est, reference)?;
    let finite: Vec<f64> = bands.iter().copied().filter(|v| v.is_finite()).collect();
    let db = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(Psnr {
        db,
        infinite_bands: bands.len() - finite.len(),
    })
}

/// PSNR from the MSE over the whole cube.
pub fn psnr_whole(est: &HsiCube, reference: &HsiCube) -> Result<f64> {
    check(est, reference)?;
    let n = est.data().len() as f64;
    let mse = est
        .data()
        .iter()
        .zip(reference.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

fn ssim_band(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let n = SSIM_WINDOW;
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                let row = (y + dy) * w + x;
                for (dx, gx) in g.iter().enumerate() {
                    let wgt = gy * gx;
                    let (u, v) = (a[row + dx], b[row + dx]);
                    ma += wgt * u;
                    mb += wgt * v;
                    saa += wgt * u * u;
                    sbb += wgt * v * v;
                    sab += wgt * u * v;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Mean over bands of SSIM with an 11x11 Gaussian window (σ = 1.5), valid
/// window positions only.
pub fn ssim(est: &HsiCube, reference: &HsiCube) -> Result<f64> {
    check(est, reference)?;
    let (h, w, bands) = est.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DecscError::invalid(format!(
            "band {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if est.data() == reference.data() {
        return Ok(1.0);
    }
    let g = gaussian_window();
    let per = par::map_range(bands, |b| ssim_band(est.band(b), reference.band(b), h, w, &g));
    Ok(per.iter().sum::<f64>() / bands as f64)
}

/// Mean spectral angle over pixels; pixels where either spectrum is zero are
/// skipped and counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sam {
    pub radians: f64,
    pub skipped: usize,
}

pub fn sam(est: &HsiCube, reference: &HsiCube) -> Result<Sam> {
    check(est, reference)?;
    let (h, w, bands) = est.dims();
    if bands < 2 {
        return Err(DecscError::invalid("spectral angle needs at least two bands"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for px in 0..h * w {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for b in 0..bands {
            let u = est.band(b)[px];
            let v = reference.band(b)[px];
            dot += u * v;
            na += u * u;
            nb += v * v;
        }
        if na == 0.0 || nb == 0.0 {
            skipped += 1;
            continue;
        }
        let c = (dot / (na * nb).sqrt().max(SAM_EPS)).clamp(-1.0, 1.0);
        total += c.acos();
        used += 1;
    }
    let radians = if used == 0 { 0.0 } else { total / used as f64 };
    Ok(Sam { radians, skipped })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ssim: f64,
    pub sam: Sam,
    pub band_psnr: Vec<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "psnr,psnr_infinite_bands,ssim,sam,sam_skipped_pixels";

    pub fn compute(est: &HsiCube, reference: &HsiCube) -> Result<Self> {
        Ok(Self {
            psnr: psnr(est, reference)?,
            ssim: ssim(est, reference)?,
            sam: sam(est, reference)?,
            band_psnr: psnr_per_band(est, reference)?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            fmt_real(self.psnr.db),
            self.psnr.infinite_bands,
            fmt_real(self.ssim),
            fmt_real(self.sam.radians),
            self.sam.skipped
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let flag = if self.psnr.is_flagged() {
            format!(" ({} identical bands excluded)", self.psnr.infinite_bands)
        } else {
            String::new()
        };
        let _ = writeln!(out, "PSNR  {:>10.4} dB{flag}", self.psnr.db);
        let _ = writeln!(out, "SSIM  {:>10.6}", self.ssim);
        let _ = writeln!(out, "SAM   {:>10.6} rad", self.sam.radians);
        for (b, p) in self.band_psnr.iter().enumerate() {
            let _ = writeln!(out, "  band {b:>3}: {p:.4} dB");
        }
        out
    }
}

/// Round-trippable decimal form; infinities as `inf`.
pub fn fmt_real(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, b: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::from_vec(h, w, b, (0..h * w * b).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_identity_is_flagged() {
        let x = random(4, 4, 3, 1);
        let p = psnr(&x, &x).unwrap();
        assert!(p.db.is_infinite() && p.infinite_bands == 3);
    }

    #[test]
    fn psnr_offset_gives_twenty_db() {
        let x = HsiCube::from_vec(3, 3, 1, vec![0.4; 9]).unwrap();
        let y = HsiCube::from_vec(3, 3, 1, vec![0.5; 9]).unwrap();
        assert!((psnr(&y, &x).unwrap().db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_naive_loop() {
        let a = random(5, 7, 4, 2);
        let b = random(5, 7, 4, 3);
        let mut sum = 0.0;
        for band in 0..4 {
            let mut mse = 0.0;
            for r in 0..5 {
                for c in 0..7 {
                    mse += (a.get(r, c, band) - b.get(r, c, band)).powi(2);
                }
            }
            sum += 10.0 * (1.0 / (mse / 35.0)).log10();
        }
        assert!((psnr(&a, &b).unwrap().db - sum / 4.0).abs() <= 1e-10);
    }

    #[test]
    fn partial_identity_excludes_band() {
        let a = random(4, 4, 2, 4);
        let mut b = a.clone();
        b.band_mut(1).iter_mut().for_each(|v| *v += 0.1);
        let p = psnr(&b, &a).unwrap();
        assert_eq!(p.infinite_bands, 1);
        assert!((p.db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_shift() {
        let x = random(12, 12, 2, 5);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let a = HsiCube::from_vec(12, 12, 1, vec![0.5; 144]).unwrap();
        let b = HsiCube::from_vec(12, 12, 1, vec![0.6; 144]).unwrap();
        let expect = (2.0 * 0.5 * 0.6 + C1) / (0.25 + 0.36 + C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.983).abs() < 1e-3);
    }

    #[test]
    fn ssim_inverted_pattern_is_negative() {
        let mut data = Vec::new();
        for r in 0..16 {
            for c in 0..16 {
                data.push(if (r + c) % 2 == 0 { 0.9 } else { 0.1 });
            }
        }
        let x = HsiCube::from_vec(16, 16, 1, data.clone()).unwrap();
        let inv = HsiCube::from_vec(16, 16, 1, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&inv, &x).unwrap() < 0.0);
    }

    #[test]
    fn ssim_refuses_small_bands() {
        let x = random(10, 12, 1, 6);
        assert!(ssim(&x, &x).is_err());
    }

    #[test]
    fn sam_angles() {
        let a = HsiCube::from_vec(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let b = HsiCube::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert!((sam(&a, &b).unwrap().radians - std::f64::consts::FRAC_PI_2).abs() <= 1e-12);
        let c = HsiCube::from_vec(1, 1, 2, vec![1.0, 1.0]).unwrap();
        assert!((sam(&c, &a).unwrap().radians - std::f64::consts::FRAC_PI_4).abs() <= 1e-8);
        let x = random(3, 3, 4, 7);
        assert!(sam(&x, &x).unwrap().radians < 1e-7);
        let z = HsiCube::zeros(3, 3, 4);
        assert_eq!(sam(&z, &x).unwrap().skipped, 9);
    }

    #[test]
    fn shape_mismatch() {
        let a = random(4, 4, 2, 8);
        let b = random(4, 5, 2, 8);
        assert!(psnr(&a, &b).is_err());
        assert!(sam(&a, &b).is_err());
    }

    #[test]
    fn report_csv_for_identical_inputs() {
        let x = random(11, 11, 3, 9);
        let r = MetricReport::compute(&x, &x).unwrap();
        let csv = r.to_csv();
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("inf,3,1.0,"));
    }

    proptest! {
        #[test]
        fn affine_psnr_shift(a in 0.2f64..0.9, seed in 0u64..1000) {
            let x = random(4, 4, 2, seed);
            let mut y = x.clone();
            y.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (*v + 0.05 * ((i as f64).sin())).clamp(0.0, 1.0));
            let map = |c: &HsiCube| {
                let mut d = c.clone();
                d.data_mut().iter_mut().for_each(|v| *v = a * *v + 0.05);
                d
            };
            let base = psnr(&y, &x).unwrap().db;
            let moved = psnr(&map(&y), &map(&x)).unwrap().db;
            prop_assert!((moved - (base - 20.0 * a.log10())).abs() < 1e-9);
        }

        #[test]
        fn sam_scale_invariant(l in 0.1f64..10.0, seed in 0u64..1000) {
            let x = random(3, 3, 4, seed);
            let y = random(3, 3, 4, seed + 1);
            let mut ly = y.clone();
            ly.data_mut().iter_mut().for_each(|v| *v *= l);
            prop_assert!((sam(&ly, &x).unwrap().radians - sam(&y, &x).unwrap().radians).abs() <= 1e-12);
        }

        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            let x = random(12, 13, 2, seed);
            let y = random(12, 13, 2, seed + 7);
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() <= 1e-12);
        }
    }
}
