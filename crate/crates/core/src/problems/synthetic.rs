//! Calibration problems with closed-form solutions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DlraError, Result};
use crate::lowrank::{random_lowrank, random_orthonormal, LowRankState, SingularValueLaw};
use crate::rhs::{FactorTerm, SumFactorRhs};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    /// `F(Y) = a Y`.
    ScalarExponential { a: f64 },
    /// `F(Y) = A Y + Y B` with symmetric `A`, `B`.
    TwoSided,
    /// `F(Y) = A Y - Y A` with skew-symmetric `A`; preserves the norm.
    Skew,
}

/// Exact propagators: `Y(t) = left(t) Y0 right(t)`.
#[derive(Debug, Clone)]
enum Propagator {
    Scalar(f64),
    /// `Q diag(e^{lambda t}) Q^T` on each side.
    Spectral { qa: DMatrix<f64>, la: DVector<f64>, qb: DMatrix<f64>, lb: DVector<f64> },
    /// `Q R(omega t) Q^T` with 2x2 rotation blocks.
    Rotation { q: DMatrix<f64>, omega: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub kind: SyntheticKind,
    pub rhs: SumFactorRhs<f64>,
    pub y0: LowRankState<f64>,
    prop: Propagator,
}

fn rotation_exp(q: &DMatrix<f64>, omega: &[f64], t: f64) -> DMatrix<f64> {
    let n = q.nrows();
    let mut r = DMatrix::<f64>::identity(n, n);
    for (b, &w) in omega.iter().enumerate() {
        let (c, s) = ((w * t).cos(), (w * t).sin());
        let i = 2 * b;
        r[(i, i)] = c;
        r[(i, i + 1)] = s;
        r[(i + 1, i)] = -s;
        r[(i + 1, i + 1)] = c;
    }
    q * r * q.transpose()
}

fn spectral_exp(q: &DMatrix<f64>, l: &DVector<f64>, t: f64) -> DMatrix<f64> {
    q * DMatrix::from_diagonal(&l.map(|x| (x * t).exp())) * q.transpose()
}

impl SyntheticProblem {
    /// Closed-form `Y(t)` from `y0`.
    pub fn solution(&self, t: f64) -> DMatrix<f64> {
        let y0 = self.y0.dense();
        match &self.prop {
            Propagator::Scalar(a) => y0 * (a * t).exp(),
            Propagator::Spectral { qa, la, qb, lb } => spectral_exp(qa, la, t) * y0 * spectral_exp(qb, lb, t),
            Propagator::Rotation { q, omega } => {
                let e = rotation_exp(q, omega, t);
                &e * y0 * e.transpose()
            }
        }
    }
}

/// Builds a calibration problem with a random rank-`r` initial value.
pub fn synthetic_exact(m: usize, n: usize, r: usize, kind: SyntheticKind, seed: u64) -> Result<SyntheticProblem> {
    let y0 = random_lowrank::<f64>(m, n, r, seed, &SingularValueLaw::Geometric(0.5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_eed0_fa11);
    let mut rhs = SumFactorRhs::new(m, n);
    let prop = match kind {
        SyntheticKind::ScalarExponential { a } => {
            rhs.add_term(FactorTerm::new(CsrMatrix::identity(m).scaled(a), CsrMatrix::identity(n)))?;
            Propagator::Scalar(a)
        }
        SyntheticKind::TwoSided => {
            let qa = random_orthonormal::<f64>(m, m, &mut rng, true)?;
            let qb = random_orthonormal::<f64>(n, n, &mut rng, true)?;
            let la = DVector::from_fn(m, |i, _| -1.0 + 1.5 * i as f64 / m.max(2) as f64);
            let lb = DVector::from_fn(n, |i, _| -0.5 + 0.8 * i as f64 / n.max(2) as f64);
            let a = &qa * DMatrix::from_diagonal(&la) * qa.transpose();
            let b = &qb * DMatrix::from_diagonal(&lb) * qb.transpose();
            let (a, b) = ((&a + a.transpose()) * 0.5, (&b + b.transpose()) * 0.5);
            rhs.add_term(FactorTerm::new(CsrMatrix::from_dense(&a, 0.0), CsrMatrix::identity(n)))?;
            rhs.add_term(FactorTerm::new(CsrMatrix::identity(m), CsrMatrix::from_dense(&b, 0.0)))?;
            Propagator::Spectral { qa, la, qb, lb }
        }
        SyntheticKind::Skew => {
            if m != n {
                return Err(DlraError::InvalidInput("skew problem needs m = n".into()));
            }
            let q = random_orthonormal::<f64>(n, n, &mut rng, true)?;
            let omega: Vec<f64> = (0..n / 2).map(|b| 0.5 + b as f64 / (n / 2).max(1) as f64).collect();
            let mut gen = DMatrix::<f64>::zeros(n, n);
            for (b, &w) in omega.iter().enumerate() {
                gen[(2 * b, 2 * b + 1)] = w;
                gen[(2 * b + 1, 2 * b)] = -w;
            }
            let a = &q * gen * q.transpose();
            let a = (&a - a.transpose()) * 0.5;
            rhs.add_term(FactorTerm::new(CsrMatrix::from_dense(&a, 0.0), CsrMatrix::identity(n)))?;
            rhs.add_term(FactorTerm::new(CsrMatrix::identity(n), CsrMatrix::from_dense(&a, 0.0).scaled(-1.0)))?;
            Propagator::Rotation { q, omega }
        }
    };
    Ok(SyntheticProblem { kind, rhs, y0, prop })
}
