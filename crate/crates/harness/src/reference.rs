//! Dense reference solutions and their on-disk cache.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use dlra::{integrate, MatrixOde, Scalar, SolverConfig};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 8] = b"DLRAREF1";

/// Integrates the full ODE from `a0` at `t0` to `t_final`.
pub fn reference_solution<T, R>(rhs: &R, a0: &DMatrix<T>, t0: f64, t_final: f64, solver: &SolverConfig) -> Result<DMatrix<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    let (y, _) = integrate(|t, y: &DMatrix<T>| rhs.eval_full(t, y), a0, t0, t_final, solver)?;
    Ok(y)
}

/// Directory of reference matrices named by the SHA-256 of their description.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    dir: PathBuf,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let digest = Sha256::digest(key.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("ref-{hex}.bin"))
    }

    /// Returns the cached matrix for `key`, computing and storing it on a miss.
    /// Unreadable or mismatching files are recomputed.
    pub fn get_or_compute<T: Scalar>(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<DMatrix<T>>,
    ) -> Result<DMatrix<T>> {
        let path = self.path_for(key);
        if let Some(m) = load(&path, key) {
            return Ok(m);
        }
        let m = compute()?;
        fs::create_dir_all(&self.dir).map_err(|e| HarnessError::io(&self.dir, e))?;
        // Write-then-rename so concurrent readers never see a partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, encode(key, &m)).map_err(|e| HarnessError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(m)
    }
}

fn encode<T: Scalar>(key: &str, m: &DMatrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + key.len() + 16 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(key.len() as u64).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    out.push(T::IS_COMPLEX as u8);
    for x in m.iter() {
        let (re, im) = x.parts();
        out.extend_from_slice(&re.to_le_bytes());
        if T::IS_COMPLEX {
            out.extend_from_slice(&im.to_le_bytes());
        }
    }
    out
}

fn load<T: Scalar>(path: &Path, key: &str) -> Option<DMatrix<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path).ok()?.read_to_end(&mut bytes).ok()?;
    let mut r = bytes.as_slice();
    let mut take = |n: usize| -> Option<&[u8]> {
        if r.len() < n {
            return None;
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Some(head)
    };
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
    if take(8)? != MAGIC {
        return None;
    }
    let klen = u64_of(take(8)?) as usize;
    if take(klen)? != key.as_bytes() {
        return None;
    }
    let rows = u64_of(take(8)?) as usize;
    let cols = u64_of(take(8)?) as usize;
    if take(1)?[0] != T::IS_COMPLEX as u8 {
        return None;
    }
    let per = if T::IS_COMPLEX { 16 } else { 8 };
    let data = take(rows.checked_mul(cols)?.checked_mul(per)?)?;
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
    let vals = data.chunks_exact(per).map(|c| if T::IS_COMPLEX { T::from_parts(f(&c[..8]), f(&c[8..])) } else { T::from_parts(f(c), 0.0) });
    Some(DMatrix::from_iterator(rows, cols, vals))
}
