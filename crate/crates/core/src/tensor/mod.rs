//! Dense hyperspectral storage and the convolutional synthesis/analysis
//! operators shared by every higher layer.
//!
//! All "⋆" and "⊗" operators are zero-padded "same" cross-correlations;
//! their adjoints are correlations with flipped kernels. Cubes are stored
//! band-major (`B x H x W`), codes channel-major.

pub mod corr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DecscError, Result};
use corr::CorrGeom;

/// Flat real storage shared by cubes, codes and kernels.
pub trait Flat {
    fn data(&self) -> &[f64];
    fn data_mut(&mut self) -> &mut [f64];

    fn len(&self) -> usize {
        self.data().len()
    }

    fn is_empty(&self) -> bool {
        self.data().is_empty()
    }

    fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    fn norm(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += a * other`
    fn axpy(&mut self, a: f64, other: &Self) {
        for (d, s) in self.data_mut().iter_mut().zip(other.data()) {
            *d += a * s;
        }
    }

    fn scale(&mut self, a: f64) {
        self.data_mut().iter_mut().for_each(|v| *v *= a);
    }
}

macro_rules! impl_flat {
    ($($t:ty),*) => {$(
        impl Flat for $t {
            fn data(&self) -> &[f64] { &self.data }
            fn data_mut(&mut self) -> &mut [f64] { &mut self.data }
        }
    )*};
}

/// Hyperspectral volume, `bands x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn from_vec(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(DecscError::shape("cube dimensions must be positive"));
        }
        if data.len() != height * width * bands {
            return Err(DecscError::shape(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[b * plane..(b + 1) * plane]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[b * plane..(b + 1) * plane]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, band: usize, v: f64) {
        self.data[(band * self.height + row) * self.width + col] = v;
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &HsiCube) -> bool {
        self.dims() == other.dims()
    }

    /// Spatial window `[row, row+h) x [col, col+w)` over all bands.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<HsiCube> {
        if row + h > self.height || col + w > self.width || h == 0 || w == 0 {
            return Err(DecscError::shape(format!(
                "crop {h}x{w} at ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = HsiCube::zeros(h, w, self.bands);
        for b in 0..self.bands {
            for r in 0..h {
                let src = &self.band(b)[(row + r) * self.width + col..][..w];
                out.band_mut(b)[r * w..(r + 1) * w].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &HsiCube) -> Result<HsiCube> {
        check_same(self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(HsiCube { data, ..*self })
    }

    pub fn add(&self, other: &HsiCube) -> Result<HsiCube> {
        check_same(self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(HsiCube { data, ..*self })
    }

    pub fn clip_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

fn check_same(a: &HsiCube, b: &HsiCube) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(DecscError::shape(format!(
            "cube dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )))
    }
}

/// Per-band 2-D atoms `k_{b,m}`, stored `B x M x k x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandDictionary2D {
    atoms: usize,
    bands: usize,
    ksize: usize,
    data: Vec<f64>,
}

impl BandDictionary2D {
    pub fn zeros(atoms: usize, bands: usize, ksize: usize) -> Result<Self> {
        Self::from_vec(atoms, bands, ksize, vec![0.0; atoms * bands * ksize * ksize])
    }

    pub fn from_vec(atoms: usize, bands: usize, ksize: usize, data: Vec<f64>) -> Result<Self> {
        if atoms == 0 || bands == 0 {
            return Err(DecscError::shape("dictionary needs at least one atom and band"));
        }
        if ksize % 2 == 0 {
            return Err(DecscError::invalid(format!("kernel size {ksize} must be odd")));
        }
        if data.len() != atoms * bands * ksize * ksize {
            return Err(DecscError::shape("2-D dictionary weight count"));
        }
        Ok(Self {
            atoms,
            bands,
            ksize,
            data,
        })
    }

    /// Centered delta atom for every (band, atom) pair.
    pub fn delta(atoms: usize, bands: usize, ksize: usize) -> Result<Self> {
        let mut k = Self::zeros(atoms, bands, ksize)?;
        let c = ksize / 2;
        for b in 0..bands {
            for m in 0..atoms {
                let i = k.index(b, m, c, c);
                k.data[i] = 1.0;
            }
        }
        Ok(k)
    }

    pub fn random_normal<R: Rng>(
        atoms: usize,
        bands: usize,
        ksize: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| DecscError::invalid(e.to_string()))?;
        let data = (0..atoms * bands * ksize * ksize)
            .map(|_| normal.sample(rng))
            .collect();
        Self::from_vec(atoms, bands, ksize, data)
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn ksize(&self) -> usize {
        self.ksize
    }

    pub fn index(&self, band: usize, atom: usize, ky: usize, kx: usize) -> usize {
        ((band * self.atoms + atom) * self.ksize + ky) * self.ksize + kx
    }

    fn geom(&self, height: usize, width: usize) -> CorrGeom {
        CorrGeom {
            cin: self.atoms,
            cout: self.bands,
            depth: 1,
            height,
            width,
            kd: 1,
            kh: self.ksize,
            kw: self.ksize,
        }
    }
}

/// 3-D atoms `d_j`, stored `J x kb x k x k` (spectral axis outermost).
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary3D {
    atoms: usize,
    ksize: usize,
    kbands: usize,
    data: Vec<f64>,
}

impl Dictionary3D {
    pub fn zeros(atoms: usize, ksize: usize, kbands: usize) -> Result<Self> {
        Self::from_vec(
            atoms,
            ksize,
            kbands,
            vec![0.0; atoms * ksize * ksize * kbands],
        )
    }

    pub fn from_vec(atoms: usize, ksize: usize, kbands: usize, data: Vec<f64>) -> Result<Self> {
        if atoms == 0 {
            return Err(DecscError::shape("dictionary needs at least one atom"));
        }
        if ksize % 2 == 0 || kbands % 2 == 0 {
            return Err(DecscError::invalid(format!(
                "kernel {ksize}x{ksize}x{kbands} must be odd along every axis"
            )));
        }
        if data.len() != atoms * ksize * ksize * kbands {
            return Err(DecscError::shape("3-D dictionary weight count"));
        }
        Ok(Self {
            atoms,
            ksize,
            kbands,
            data,
        })
    }

    pub fn delta(atoms: usize, ksize: usize, kbands: usize) -> Result<Self> {
        let mut d = Self::zeros(atoms, ksize, kbands)?;
        for j in 0..atoms {
            let i = d.index(j, kbands / 2, ksize / 2, ksize / 2);
            d.data[i] = 1.0;
        }
        Ok(d)
    }

    pub fn random_normal<R: Rng>(
        atoms: usize,
        ksize: usize,
        kbands: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| DecscError::invalid(e.to_string()))?;
        let data = (0..atoms * ksize * ksize * kbands)
            .map(|_| normal.sample(rng))
            .collect();
        Self::from_vec(atoms, ksize, kbands, data)
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn ksize(&self) -> usize {
        self.ksize
    }

    pub fn kbands(&self) -> usize {
        self.kbands
    }

    pub fn index(&self, atom: usize, kb: usize, ky: usize, kx: usize) -> usize {
        ((atom * self.kbands + kb) * self.ksize + ky) * self.ksize + kx
    }

    fn geom(&self, height: usize, width: usize, bands: usize) -> CorrGeom {
        CorrGeom {
            cin: self.atoms,
            cout: 1,
            depth: bands,
            height,
            width,
            kd: self.kbands,
            kh: self.ksize,
            kw: self.ksize,
        }
    }
}

/// Shared code `S`, `M x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCodeS {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SparseCodeS {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(DecscError::shape("code S length"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[m * plane..(m + 1) * plane]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Band-unique code `H`, `J x B x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCodeH {
    channels: usize,
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SparseCodeH {
    pub fn zeros(channels: usize, height: usize, width: usize, bands: usize) -> Self {
        Self {
            channels,
            bands,
            height,
            width,
            data: vec![0.0; channels * bands * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != channels * bands * height * width {
            return Err(DecscError::shape("code H length"));
        }
        Ok(Self {
            channels,
            bands,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        let vol = self.bands * self.height * self.width;
        &self.data[j * vol..(j + 1) * vol]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.bands, self.height, self.width)
            == (other.channels, other.bands, other.height, other.width)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

impl_flat!(HsiCube, BandDictionary2D, Dictionary3D, SparseCodeS, SparseCodeH);

/// `K ⊗ S`: band `b` is `Σ_m k_{b,m} ⋆ S_m`.
pub fn conv2d_shared(k: &BandDictionary2D, s: &SparseCodeS) -> Result<HsiCube> {
    if s.channels != k.atoms {
        return Err(DecscError::shape(format!(
            "code has {} channels, dictionary {} atoms",
            s.channels, k.atoms
        )));
    }
    let g = k.geom(s.height, s.width);
    let data = corr::forward(&g, &k.data, &s.data);
    Ok(HsiCube {
        height: s.height,
        width: s.width,
        bands: k.bands,
        data,
    })
}

/// `Kᵀ ⊗ R`, the exact adjoint of [`conv2d_shared`].
pub fn conv2d_shared_adjoint(k: &BandDictionary2D, r: &HsiCube) -> Result<SparseCodeS> {
    if r.bands != k.bands {
        return Err(DecscError::shape(format!(
            "cube has {} bands, dictionary {}",
            r.bands, k.bands
        )));
    }
    let g = k.geom(r.height, r.width);
    let data = corr::adjoint(&g, &k.data, &r.data);
    Ok(SparseCodeS {
        channels: k.atoms,
        height: r.height,
        width: r.width,
        data,
    })
}

/// Gradient of `<R̄, K ⊗ S>` with respect to `K`.
pub fn conv2d_shared_weight_grad(
    k: &BandDictionary2D,
    s: &SparseCodeS,
    rbar: &HsiCube,
) -> Result<BandDictionary2D> {
    if s.channels != k.atoms || rbar.bands != k.bands || (s.height, s.width) != (rbar.height, rbar.width) {
        return Err(DecscError::shape("weight gradient operands"));
    }
    let g = k.geom(s.height, s.width);
    let data = corr::weight_grad(&g, &s.data, &rbar.data);
    Ok(BandDictionary2D { data, ..*k })
}

/// `D ⋆ H = Σ_j d_j ⋆ h_j`.
pub fn conv3d(d: &Dictionary3D, h: &SparseCodeH) -> Result<HsiCube> {
    if h.channels != d.atoms {
        return Err(DecscError::shape(format!(
            "code has {} channels, dictionary {} atoms",
            h.channels, d.atoms
        )));
    }
    let g = d.geom(h.height, h.width, h.bands);
    let data = corr::forward(&g, &d.data, &h.data);
    Ok(HsiCube {
        height: h.height,
        width: h.width,
        bands: h.bands,
        data,
    })
}

/// `Dᵀ ⋆ R`, the exact adjoint of [`conv3d`].
pub fn conv3d_adjoint(d: &Dictionary3D, r: &HsiCube) -> Result<SparseCodeH> {
    let g = d.geom(r.height, r.width, r.bands);
    let data = corr::adjoint(&g, &d.data, &r.data);
    Ok(SparseCodeH {
        channels: d.atoms,
        bands: r.bands,
        height: r.height,
        width: r.width,
        data,
    })
}

/// Gradient of `<R̄, D ⋆ H>` with respect to `D`.
pub fn conv3d_weight_grad(d: &Dictionary3D, h: &SparseCodeH, rbar: &HsiCube) -> Result<Dictionary3D> {
    if h.channels != d.atoms || (h.height, h.width, h.bands) != rbar.dims() {
        return Err(DecscError::shape("weight gradient operands"));
    }
    let g = d.geom(h.height, h.width, h.bands);
    let data = corr::weight_grad(&g, &h.data, &rbar.data);
    Ok(Dictionary3D { data, ..*d })
}

pub fn inner_product(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DecscError::shape(format!(
            "inner product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}
