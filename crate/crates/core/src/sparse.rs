//! Row-compressed sparse matrices used as factors of structured right-hand sides.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{shape_err, DlraError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T: Scalar> {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
    identity: bool,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); nrows];
        for &(i, j, v) in triplets {
            if i >= nrows || j >= ncols {
                return Err(DlraError::InvalidInput(format!(
                    "triplet ({i}, {j}) outside {nrows}x{ncols}"
                )));
            }
            if !v.finite() {
                return Err(DlraError::InvalidInput(format!("non-finite entry at ({i}, {j})")));
            }
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            let mut iter = row.into_iter().peekable();
            while let Some((j, mut v)) = iter.next() {
                while let Some(&(j2, v2)) = iter.peek() {
                    if j2 != j {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { nrows, ncols, row_ptr, col_idx, values, identity: false })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![T::one(); n],
            identity: true,
        }
    }

    pub fn diagonal(diag: &[T]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: diag.to_vec(),
            identity: false,
        }
    }

    /// Keeps entries with modulus above `drop_below`.
    pub fn from_dense(a: &DMatrix<T>, drop_below: f64) -> Self {
        let mut triplets = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let v = a[(i, j)];
                if v.modulus() > drop_below {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &triplets).expect("entries from a dense matrix are in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Mean number of stored entries per row.
    pub fn entries_per_row(&self) -> f64 {
        if self.nrows == 0 {
            0.0
        } else {
            self.nnz() as f64 / self.nrows as f64
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (i, self.col_idx[p], self.values[p]))
        })
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            values: self.values.iter().map(|&v| v * alpha).collect(),
            identity: self.identity && alpha == T::one(),
            ..self.clone()
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        if self.identity {
            return self.clone();
        }
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v.conjugate())).collect();
        Self::from_triplets(self.ncols, self.nrows, &trip).expect("transposed indices are in range")
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut out = DMatrix::<T>::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            out[(i, j)] += v;
        }
        out
    }

    /// `A B` for dense `B`.
    pub fn mul_dense(&self, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        if b.nrows() != self.ncols {
            return Err(shape_err("CsrMatrix::mul_dense", format!("{} rows", self.ncols), b.shape()));
        }
        if self.identity {
            return Ok(b.clone());
        }
        let k = b.ncols();
        let mut out = DMatrix::<T>::zeros(self.nrows, k);
        for c in 0..k {
            let src = b.column(c);
            let mut dst = out.column_mut(c);
            for i in 0..self.nrows {
                let mut acc = T::zero();
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.values[p] * src[self.col_idx[p]];
                }
                dst[i] = acc;
            }
        }
        Ok(out)
    }

    /// `B A` for dense `B`.
    pub fn right_mul_dense(&self, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        if b.ncols() != self.nrows {
            return Err(shape_err("CsrMatrix::right_mul_dense", format!("{} columns", self.nrows), b.shape()));
        }
        if self.identity {
            return Ok(b.clone());
        }
        let mut out = DMatrix::<T>::zeros(b.nrows(), self.ncols);
        for i in 0..self.nrows {
            let src = b.column(i);
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.values[p];
                let mut dst = out.column_mut(self.col_idx[p]);
                dst.axpy(v, &src, T::one());
            }
        }
        Ok(out)
    }

    /// Multiply-accumulate count of `mul_dense` / `right_mul_dense` against a
    /// dense operand with `k` columns (resp. rows).
    pub fn mac_count(&self, k: usize) -> u64 {
        if self.identity {
            0
        } else {
            (self.nnz() * k) as u64
        }
    }

    /// Reads a coordinate file: a `rows cols` header followed by
    /// `row col value` (real) or `row col re im` (complex) lines, 0-based.
    /// Lines starting with `#` or `%` are comments.
    pub fn read_triplet_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_triplets(&text)
    }

    pub fn parse_triplets(text: &str) -> Result<Self> {
        let mut shape = None;
        let mut trip = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('%') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |msg: &str| DlraError::Parse { line: lineno + 1, msg: msg.to_string() };
            let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err("expected an index"));
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err("expected a number"));
            match shape {
                None => {
                    if fields.len() != 2 {
                        return Err(parse_err("expected `rows cols` header"));
                    }
                    shape = Some((int(fields[0])?, int(fields[1])?));
                }
                Some(_) => {
                    let value = match fields.len() {
                        3 => T::from_parts(num(fields[2])?, 0.0),
                        4 if T::IS_COMPLEX => T::from_parts(num(fields[2])?, num(fields[3])?),
                        4 => return Err(parse_err("complex entry in a real factor")),
                        _ => return Err(parse_err("expected `row col value`")),
                    };
                    trip.push((int(fields[0])?, int(fields[1])?, value));
                }
            }
        }
        let (r, c) = shape.ok_or(DlraError::Parse { line: 0, msg: "empty triplet file".into() })?;
        Self::from_triplets(r, c, &trip)
    }

    pub fn to_triplet_text(&self) -> String {
        let mut s = format!("{} {}\n", self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            let (re, im) = v.parts();
            if T::IS_COMPLEX {
                writeln!(s, "{i} {j} {re:e} {im:e}").unwrap();
            } else {
                writeln!(s, "{i} {j} {re:e}").unwrap();
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Complex;

    fn sample() -> CsrMatrix<f64> {
        CsrMatrix::from_triplets(3, 4, &[(0, 1, 2.0), (2, 3, -1.0), (0, 1, 1.0), (1, 0, 4.0), (2, 0, 0.5)]).unwrap()
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = sample();
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.to_dense()[(0, 1)], 3.0);
        assert_eq!(a.row_nnz(2), 2);
    }

    #[test]
    fn products_match_dense() {
        let a = sample();
        let b = DMatrix::from_fn(4, 2, |i, j| (i * 3 + j) as f64 - 2.5);
        assert_eq!(a.mul_dense(&b).unwrap(), a.to_dense() * &b);
        let c = DMatrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64 * 0.3);
        assert_eq!(c.clone() * a.to_dense(), a.right_mul_dense(&c).unwrap());
        assert!(a.mul_dense(&c).is_err());
    }

    #[test]
    fn adjoint_conjugates() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 1, Complex::new(1.0, 2.0))]).unwrap();
        assert_eq!(a.adjoint().to_dense(), a.to_dense().adjoint());
    }

    #[test]
    fn triplet_text_round_trip() {
        let a = sample();
        let back = CsrMatrix::<f64>::parse_triplets(&a.to_triplet_text()).unwrap();
        assert_eq!(a, back);
        assert!(CsrMatrix::<f64>::parse_triplets("2 2\n5 0 1.0\n").is_err());
        assert!(CsrMatrix::<f64>::parse_triplets("2 2\n0 0 1.0 2.0\n").is_err());
        assert!(matches!(
            CsrMatrix::<f64>::parse_triplets("2 2\n0 x 1\n"),
            Err(DlraError::Parse { line: 2, .. })
        ));
    }
}
