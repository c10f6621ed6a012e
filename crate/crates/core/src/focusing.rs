//! Frequency focusing: per-bin matrices T(f, f0) with T·H(f) ≈ H(f0).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{debug, warn};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::array::{steering_matrix, ArrayGeometry, SteeringMatrix};
use crate::error::{Error, Result};
use crate::grid::DirectionGrid;
use crate::stft::BandPlan;

/// Singular values below this fraction of the largest are discarded.
pub const PINV_RCOND: f64 = 1e-6;

/// Pseudo-inverse through a truncated SVD. Also returns the retained rank.
///
/// Wide matrices go through a thin QR of the adjoint first, so the SVD only
/// sees a square factor of the smaller dimension.
pub fn pinv(m: &DMatrix<Complex64>, rcond: f64) -> (DMatrix<Complex64>, usize) {
    if m.ncols() > m.nrows() {
        // m = Rᴴ Qᴴ, pinv(m) = Q pinv(Rᴴ)
        let qr = m.adjoint().qr();
        let (p, rank) = pinv_svd(&qr.r().adjoint(), rcond);
        return (qr.q() * p, rank);
    }
    pinv_svd(m, rcond)
}

fn pinv_svd(m: &DMatrix<Complex64>, rcond: f64) -> (DMatrix<Complex64>, usize) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > rcond * smax && s > 0.0 {
            rank += 1;
            out += v_t.row(i).adjoint() * (u.column(i).adjoint() / Complex64::new(s, 0.0));
        }
    }
    (out, rank)
}

/// T = H(f0)·pinv(H(f)), the least-squares solution of T·H(f) = H(f0).
pub fn focusing_matrix(h_f: &SteeringMatrix, h_f0: &SteeringMatrix) -> Result<DMatrix<Complex64>> {
    if h_f.entries.shape() != h_f0.entries.shape() {
        return Err(Error::Dimension(format!(
            "steering matrices differ in shape: {:?} vs {:?}",
            h_f.entries.shape(),
            h_f0.entries.shape()
        )));
    }
    let q = h_f.num_mics();
    let (p, rank) = pinv(&h_f.entries, PINV_RCOND);
    if rank < q {
        debug!(
            "steering matrix at {:.1} Hz has numerical rank {rank} < {q}; pseudo-inverse truncated",
            h_f.frequency
        );
    }
    Ok(&h_f0.entries * p)
}

/// ‖T·H(f) − H(f0)‖_F / ‖H(f0)‖_F.
pub fn focusing_residual(t: &DMatrix<Complex64>, h_f: &SteeringMatrix, h_f0: &SteeringMatrix) -> f64 {
    (t * &h_f.entries - &h_f0.entries).norm() / h_f0.entries.norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandFocusing {
    pub band: usize,
    pub center_hz: f64,
    /// One matrix per phase-alignment frequency of the band.
    pub matrices: Vec<DMatrix<Complex64>>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocusingOperator {
    pub num_mics: usize,
    pub bands: Vec<BandFocusing>,
}

pub fn build_focusing(array: &ArrayGeometry, plan: &BandPlan, grid: &DirectionGrid) -> Result<FocusingOperator> {
    let bands = plan
        .bands
        .par_iter()
        .map(|band| {
            let h0 = steering_matrix(array, band.center_hz, grid);
            let mut matrices = Vec::with_capacity(band.freqs.len());
            let mut residuals = Vec::with_capacity(band.freqs.len());
            for &f in &band.freqs {
                let hf = steering_matrix(array, f, grid);
                let t = focusing_matrix(&hf, &h0)?;
                residuals.push(focusing_residual(&t, &hf, &h0));
                matrices.push(t);
            }
            Ok(BandFocusing {
                band: band.index,
                center_hz: band.center_hz,
                matrices,
                residuals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FocusingOperator {
        num_mics: array.num_mics(),
        bands,
    })
}

/// Focused snapshots T·P for a Q × frames matrix P.
pub fn focus_frames(t: &DMatrix<Complex64>, frames: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    t * frames
}

/// T·R·Tᴴ, the SCM of the focused snapshots.
pub fn focus_scm(t: &DMatrix<Complex64>, r: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let mut out = t * r * t.adjoint();
    crate::stft::hermitize(&mut out);
    out
}

fn hash_json<T: Serialize>(v: &T) -> Result<[u8; 32]> {
    let bytes = serde_json::to_vec(v)?;
    Ok(Sha256::digest(&bytes).into())
}

const CACHE_MAGIC: &[u8; 8] = b"ERFOCUS1";

struct CacheKey {
    array: [u8; 32],
    plan: [u8; 32],
    grid: [u8; 32],
}

impl CacheKey {
    fn new(array: &ArrayGeometry, plan: &BandPlan, grid: &DirectionGrid) -> Result<Self> {
        Ok(CacheKey {
            array: hash_json(array)?,
            plan: hash_json(plan)?,
            grid: hash_json(grid)?,
        })
    }

    fn file_name(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.array);
        h.update(self.plan);
        h.update(self.grid);
        let digest = h.finalize();
        let hex: String = digest[..12].iter().map(|b| format!("{b:02x}")).collect();
        format!("focusing-{hex}.bin")
    }
}

fn encode(op: &FocusingOperator, key: &CacheKey) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&key.array)?;
    out.write_all(&key.plan)?;
    out.write_all(&key.grid)?;
    out.write_u32::<LittleEndian>(op.num_mics as u32)?;
    out.write_u32::<LittleEndian>(op.bands.len() as u32)?;
    for b in &op.bands {
        out.write_u32::<LittleEndian>(b.band as u32)?;
        out.write_f64::<LittleEndian>(b.center_hz)?;
        out.write_u32::<LittleEndian>(b.matrices.len() as u32)?;
        for (m, r) in b.matrices.iter().zip(&b.residuals) {
            out.write_f64::<LittleEndian>(*r)?;
            for v in m.iter() {
                out.write_f64::<LittleEndian>(v.re)?;
                out.write_f64::<LittleEndian>(v.im)?;
            }
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8], key: &CacheKey) -> Result<FocusingOperator> {
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    c.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format("not a focusing cache file".into()));
    }
    for expected in [&key.array, &key.plan, &key.grid] {
        let mut h = [0u8; 32];
        c.read_exact(&mut h)?;
        if &h != expected {
            return Err(Error::Format("focusing cache key mismatch".into()));
        }
    }
    let q = c.read_u32::<LittleEndian>()? as usize;
    let nb = c.read_u32::<LittleEndian>()? as usize;
    let mut bands = Vec::with_capacity(nb);
    for _ in 0..nb {
        let band = c.read_u32::<LittleEndian>()? as usize;
        let center_hz = c.read_f64::<LittleEndian>()?;
        let nm = c.read_u32::<LittleEndian>()? as usize;
        let mut matrices = Vec::with_capacity(nm);
        let mut residuals = Vec::with_capacity(nm);
        for _ in 0..nm {
            residuals.push(c.read_f64::<LittleEndian>()?);
            let mut data = Vec::with_capacity(q * q);
            for _ in 0..q * q {
                let re = c.read_f64::<LittleEndian>()?;
                let im = c.read_f64::<LittleEndian>()?;
                data.push(Complex64::new(re, im));
            }
            matrices.push(DMatrix::from_vec(q, q, data));
        }
        bands.push(BandFocusing {
            band,
            center_hz,
            matrices,
            residuals,
        });
    }
    if (c.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes in focusing cache".into()));
    }
    Ok(FocusingOperator { num_mics: q, bands })
}

/// Cache file that [`load_or_build`] uses for this configuration.
pub fn cache_path(dir: &Path, array: &ArrayGeometry, plan: &BandPlan, grid: &DirectionGrid) -> Result<PathBuf> {
    Ok(dir.join(CacheKey::new(array, plan, grid)?.file_name()))
}

/// Loads the operator from `dir` when a matching cache file exists, otherwise
/// builds and stores it.
pub fn load_or_build(
    dir: &Path,
    array: &ArrayGeometry,
    plan: &BandPlan,
    grid: &DirectionGrid,
) -> Result<FocusingOperator> {
    let key = CacheKey::new(array, plan, grid)?;
    let path = dir.join(key.file_name());
    if let Ok(bytes) = fs::read(&path) {
        match decode(&bytes, &key) {
            Ok(op) => return Ok(op),
            Err(e) => warn!("ignoring focusing cache {}: {e}", path.display()),
        }
    }
    let op = build_focusing(array, plan, grid)?;
    fs::create_dir_all(dir)?;
    // write-then-rename so concurrent readers never see a partial file
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, encode(&op, &key)?)?;
    fs::rename(&tmp, &path)?;
    Ok(op)
}
