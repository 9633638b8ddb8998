//! Binary cube files, checkpoints, atomic writes and CSV slice conversion.
//!
//! Cube layout (little-endian): `"HSIC"`, version `u32`, `H`, `W`, `B` as
//! `u32`, scalar width `u32` (4 or 8), then `H·W·B` scalars band-major with
//! rows inside each band.
//!
//! Checkpoint layout (little-endian): `"DQCK"`, version `u32`, model config
//! text (`u32` length + UTF-8), Adam flag `u8` and step `u64`, leaf count
//! `u32`, then per leaf: name (`u16` length + UTF-8), rank `u8`, dims as
//! `u32`, payload as `f64`. With Adam state, the first- and second-moment
//! leaves follow under `adam.m.` / `adam.v.` names. A SHA-256 digest of all
//! preceding bytes closes the file.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{DecscError, Result};
use crate::layers::{ModelConfig, ModelParams};
use crate::tensor::{Flat, HsiCube};
use crate::train::AdamState;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u32 = 1;
const CUBE_HEADER: usize = 24;
pub const CKPT_MAGIC: &[u8; 4] = b"DQCK";
pub const CKPT_VERSION: u32 = 1;
const DIGEST: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    fn bytes(self) -> usize {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }
}

/// Writes `bytes` to a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| DecscError::Io(e.error))?;
    Ok(())
}

pub fn encode_cube(x: &HsiCube, width: ScalarWidth) -> Vec<u8> {
    let (h, w, b) = x.dims();
    let mut out = Vec::with_capacity(CUBE_HEADER + x.len() * width.bytes());
    out.extend_from_slice(CUBE_MAGIC);
    for v in [CUBE_VERSION, h as u32, w as u32, b as u32, width.bytes() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in x.data() {
        match width {
            ScalarWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            ScalarWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_cube(bytes: &[u8], path: &Path) -> Result<HsiCube> {
    let path_buf = || path.to_path_buf();
    if bytes.len() >= 4 && &bytes[..4] != CUBE_MAGIC {
        return Err(DecscError::BadMagic { path: path_buf() });
    }
    if bytes.len() < CUBE_HEADER {
        return Err(DecscError::Truncated {
            path: path_buf(),
            expected: CUBE_HEADER,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != CUBE_VERSION {
        return Err(DecscError::UnknownVersion { path: path_buf(), version });
    }
    let (h, w, b) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize);
    let width = match u32_at(bytes, 20) {
        4 => ScalarWidth::F32,
        8 => ScalarWidth::F64,
        other => {
            return Err(DecscError::Malformed {
                path: path_buf(),
                reason: format!("scalar width {other}"),
            })
        }
    };
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(b))
        .ok_or_else(|| DecscError::Malformed {
            path: path_buf(),
            reason: "dimensions overflow".into(),
        })?;
    let expected = CUBE_HEADER + count * width.bytes();
    if bytes.len() < expected {
        return Err(DecscError::Truncated {
            path: path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DecscError::Malformed {
            path: path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let payload = &bytes[CUBE_HEADER..];
    let data: Vec<f64> = match width {
        ScalarWidth::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        ScalarWidth::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    HsiCube::from_vec(h, w, b, data).map_err(|e| DecscError::Malformed {
        path: path_buf(),
        reason: e.to_string(),
    })
}

pub fn save_cube(path: &Path, x: &HsiCube) -> Result<()> {
    save_cube_with(path, x, ScalarWidth::F64)
}

pub fn save_cube_with(path: &Path, x: &HsiCube, width: ScalarWidth) -> Result<()> {
    atomic_write(path, &encode_cube(x, width))
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    decode_cube(&std::fs::read(path)?, path)
}

/// Parameters, the architecture that shapes them, and optional Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

fn put_leaves(out: &mut Vec<u8>, prefix: &str, p: &ModelParams) {
    for ((name, data), shape) in p.leaves().into_iter().zip(p.leaf_shapes()) {
        let full = format!("{prefix}{name}");
        out.extend_from_slice(&(full.len() as u16).to_le_bytes());
        out.extend_from_slice(full.as_bytes());
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = c.model.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.push(u8::from(c.adam.is_some()));
    out.extend_from_slice(&c.adam.as_ref().map_or(0, |a| a.step).to_le_bytes());
    let per = c.params.leaves().len() as u32;
    let leaves = if c.adam.is_some() { 3 * per } else { per };
    out.extend_from_slice(&leaves.to_le_bytes());
    put_leaves(&mut out, "", &c.params);
    if let Some(a) = &c.adam {
        put_leaves(&mut out, "adam.m.", &a.m);
        put_leaves(&mut out, "adam.v.", &a.v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(DecscError::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("record runs past end at byte {}", self.at),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn malformed(&self, reason: String) -> DecscError {
        DecscError::Malformed {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.malformed("non-UTF-8 text".into()))
    }

    fn leaves_into(&mut self, prefix: &str, p: &mut ModelParams) -> Result<()> {
        let shapes = p.leaf_shapes();
        for ((name, dst), shape) in p.leaves_mut().into_iter().zip(shapes) {
            let n = self.u16()? as usize;
            let got = self.text(n)?;
            if got != format!("{prefix}{name}") {
                return Err(self.malformed(format!("expected leaf {prefix}{name}, found {got}")));
            }
            let rank = self.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u32()? as usize);
            }
            if dims != shape {
                return Err(self.malformed(format!("leaf {got} has shape {dims:?}, expected {shape:?}")));
            }
            for v in dst.iter_mut() {
                *v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let pb = || path.to_path_buf();
    if bytes.len() >= 4 && &bytes[..4] != CKPT_MAGIC {
        return Err(DecscError::BadMagic { path: pb() });
    }
    if bytes.len() < 8 + DIGEST {
        return Err(DecscError::Truncated {
            path: pb(),
            expected: 8 + DIGEST,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != CKPT_VERSION {
        return Err(DecscError::UnknownVersion { path: pb(), version });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(DecscError::Checksum { path: pb() });
    }
    let mut r = Reader { bytes: body, at: 8, path };
    let n = r.u32()? as usize;
    let text = r.text(n)?;
    let model = ModelConfig::from_kv(&text)?;
    let has_adam = r.u8()? == 1;
    let step = r.u64()?;
    let mut params = ModelParams::zeros(&model)?;
    let per = params.leaves().len() as u32;
    let leaves = r.u32()?;
    if leaves != if has_adam { 3 * per } else { per } {
        return Err(r.malformed(format!("leaf count {leaves} does not match the model")));
    }
    r.leaves_into("", &mut params)?;
    let adam = if has_adam {
        let mut a = AdamState::new(&params);
        a.step = step;
        r.leaves_into("adam.m.", &mut a.m)?;
        r.leaves_into("adam.v.", &mut a.v)?;
        Some(a)
    } else {
        None
    };
    if r.at != body.len() {
        return Err(r.malformed(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(Checkpoint { model, params, adam })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(c))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, path)
}

/// Long-format CSV `band,row,col,value` with round-trip-exact reals.
pub fn cube_to_csv(x: &HsiCube) -> String {
    let (h, w, b) = x.dims();
    let mut out = String::from("band,row,col,value\n");
    for band in 0..b {
        let plane = x.band(band);
        for r in 0..h {
            for c in 0..w {
                let _ = writeln!(out, "{band},{r},{c},{:?}", plane[r * w + c]);
            }
        }
    }
    out
}

/// Inverse of `cube_to_csv`; rows may come in any order but every pixel of
/// every band must appear exactly once.
pub fn csv_to_cube(text: &str, path: &Path) -> Result<HsiCube> {
    let bad = |reason: String| DecscError::Malformed {
        path: PathBuf::from(path),
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("band,row,col,value") {
        return Err(bad("missing band,row,col,value header".into()));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("line {}: expected 4 fields", n + 2)));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line {}: bad index {s:?}", n + 2)));
        let v = f[3]
            .parse::<f64>()
            .map_err(|_| bad(format!("line {}: bad value {:?}", n + 2, f[3])))?;
        rows.push((idx(f[0])?, idx(f[1])?, idx(f[2])?, v));
    }
    if rows.is_empty() {
        return Err(bad("no data rows".into()));
    }
    let b = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let h = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let w = rows.iter().map(|r| r.2).max().unwrap_or(0) + 1;
    if rows.len() != h * w * b {
        return Err(bad(format!("{} rows for a {h}x{w}x{b} cube", rows.len())));
    }
    let mut x = HsiCube::zeros(h, w, b);
    let mut seen = vec![false; h * w * b];
    for (band, r, c, v) in rows {
        let k = (band * h + r) * w + c;
        if seen[k] {
            return Err(bad(format!("duplicate entry ({band},{r},{c})")));
        }
        seen[k] = true;
        x.set(r, c, band, v);
    }
    Ok(x)
}
