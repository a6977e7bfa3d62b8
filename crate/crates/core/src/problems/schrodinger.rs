//! Discrete Schrödinger equation `i dY/dt = H[Y]` on an `n x n` grid with
//! `H[Y] = -1/2 (D Y + Y D^T) + V Y V`.

use nalgebra::{Complex, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DlraError, Result};
use crate::lowrank::{random_orthonormal, LowRankState};
use crate::rhs::{FactorTerm, SumFactorRhs};
use crate::sparse::CsrMatrix;

type C = Complex<f64>;

#[derive(Debug, Clone)]
pub struct SchrodingerProblem {
    pub n: usize,
    /// `tridiag(-1, 2, -1) + e_1 e_n^T + e_n e_1^T`.
    pub d: CsrMatrix<f64>,
    /// Diagonal of `V_cos`.
    pub v_cos: Vec<f64>,
    pub rhs: SumFactorRhs<C>,
}

pub fn second_difference(n: usize) -> Result<CsrMatrix<f64>> {
    if n < 3 {
        return Err(DlraError::InvalidInput(format!("grid size {n} too small")));
    }
    let mut trip = Vec::with_capacity(3 * n);
    for i in 0..n {
        trip.push((i, i, 2.0));
        if i + 1 < n {
            trip.push((i, i + 1, -1.0));
            trip.push((i + 1, i, -1.0));
        }
    }
    trip.push((0, n - 1, 1.0));
    trip.push((n - 1, 0, 1.0));
    CsrMatrix::from_triplets(n, n, &trip)
}

/// `1 - cos(2 pi j / n)` for `j = -n/2 .. n/2 - 1`.
pub fn cosine_potential(n: usize) -> Vec<f64> {
    let half = (n / 2) as i64;
    (-half..half).map(|j| 1.0 - (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos()).collect()
}

fn complexify(a: &CsrMatrix<f64>, scale: C) -> CsrMatrix<C> {
    let trip: Vec<_> = a.triplets().map(|(i, j, v)| (i, j, scale * v)).collect();
    CsrMatrix::from_triplets(a.nrows(), a.ncols(), &trip).expect("same pattern")
}

/// Builds `F(t, Y) = -i H[Y]` as three factor terms
/// `(i/2 D, I)`, `(I, i/2 D^T)` and `(-i V, V)`.
pub fn schrodinger_build(n: usize) -> Result<SchrodingerProblem> {
    if !n.is_multiple_of(2) {
        return Err(DlraError::InvalidInput(format!("grid size {n} must be even")));
    }
    let d = second_difference(n)?;
    let v_cos = cosine_potential(n);
    let half_i = C::new(0.0, 0.5);
    let v = CsrMatrix::diagonal(&v_cos);
    let mut rhs = SumFactorRhs::new(n, n);
    rhs.add_term(FactorTerm::new(complexify(&d, half_i), CsrMatrix::identity(n)))?;
    let dt = CsrMatrix::from_triplets(n, n, &d.triplets().map(|(i, j, x)| (j, i, x)).collect::<Vec<_>>())?;
    rhs.add_term(FactorTerm::new(CsrMatrix::identity(n), complexify(&dt, half_i)))?;
    rhs.add_term(FactorTerm::new(complexify(&v, C::new(0.0, -1.0)), complexify(&v, C::new(1.0, 0.0))))?;
    Ok(SchrodingerProblem { n, d, v_cos, rhs })
}

/// Full-rank initial value `U0 diag(10^{-i}) V0^T` with random real
/// orthonormal `U0`, `V0`.
pub fn schrodinger_initial_full(n: usize, seed: u64) -> Result<LowRankState<C>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthonormal::<C>(n, n, &mut rng, true)?;
    let v = random_orthonormal::<C>(n, n, &mut rng, true)?;
    let s = DMatrix::from_fn(n, n, |i, j| if i == j { C::new(10f64.powi(-(i as i32 + 1)), 0.0) } else { C::new(0.0, 0.0) });
    LowRankState::new(u, s, v, 0.0)
}

/// The full initial value truncated to its leading `r` singular triplets.
/// Returns the state and the discarded singular mass.
pub fn schrodinger_initial(n: usize, r: usize, seed: u64) -> Result<(LowRankState<C>, f64)> {
    if r == 0 || r > n {
        return Err(DlraError::InvalidInput(format!("rank {r} invalid for n = {n}")));
    }
    let full = schrodinger_initial_full(n, seed)?;
    let discarded = (r..n).map(|i| full.s[(i, i)].norm_sqr()).sum::<f64>().sqrt();
    let state = LowRankState::new(
        full.u.columns(0, r).into_owned(),
        full.s.view((0, 0), (r, r)).into_owned(),
        full.v.columns(0, r).into_owned(),
        0.0,
    )?;
    Ok((state, discarded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{frobenius_inner, gaussian_matrix};
    use crate::rhs::MatrixOde;

    /// Dense `-i H[Y]` from explicitly assembled matrices.
    fn dense_minus_i_h(n: usize, y: &DMatrix<C>) -> DMatrix<C> {
        let mut d = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = 2.0;
            if i + 1 < n {
                d[(i, i + 1)] = -1.0;
                d[(i + 1, i)] = -1.0;
            }
        }
        d[(0, n - 1)] += 1.0;
        d[(n - 1, 0)] += 1.0;
        let v = DMatrix::<f64>::from_fn(n, n, |i, j| {
            if i == j {
                1.0 - (2.0 * std::f64::consts::PI * (i as f64 - (n / 2) as f64) / n as f64).cos()
            } else {
                0.0
            }
        });
        let (d, v) = (d.map(|x| C::new(x, 0.0)), v.map(|x| C::new(x, 0.0)));
        let h = (&d * y + y * d.transpose()) * C::new(-0.5, 0.0) + &v * y * &v;
        h * C::new(0.0, -1.0)
    }

    #[test]
    fn matches_dense_assembly() {
        let p = schrodinger_build(4).unwrap();
        let eye = DMatrix::<C>::identity(4, 4);
        let f = p.rhs.eval_full(0.0, &eye).unwrap();
        assert!((f - dense_minus_i_h(4, &eye)).norm() <= 1e-13);
        let y = gaussian_matrix::<C>(10, 10, &mut ChaCha8Rng::seed_from_u64(1), false);
        let p = schrodinger_build(10).unwrap();
        assert!((p.rhs.eval_full(0.0, &y).unwrap() - dense_minus_i_h(10, &y)).norm() <= 1e-13 * y.norm());
    }

    #[test]
    fn structure() {
        let p = schrodinger_build(100).unwrap();
        assert_eq!(p.d.nnz(), 300);
        assert_eq!(p.d.to_dense(), p.d.to_dense().transpose());
        assert_eq!(p.v_cos.len(), 100);
        assert_eq!(p.v_cos[50], 0.0);
        assert!(schrodinger_build(7).is_err());
    }

    #[test]
    fn norm_compatible() {
        let p = schrodinger_build(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let z = gaussian_matrix::<C>(12, 12, &mut rng, false);
            let ip = frobenius_inner(&z, &p.rhs.eval_full(0.0, &z).unwrap());
            assert!(ip.re.abs() <= 1e-10 * z.norm_squared());
        }
    }

    #[test]
    fn initial_values() {
        let (full, gone) = schrodinger_initial(8, 8, 3).unwrap();
        assert_eq!(gone, 0.0);
        for i in 0..8 {
            assert_eq!(full.s[(i, i)].re, 10f64.powi(-(i as i32 + 1)));
        }
        let (y5, gone) = schrodinger_initial(20, 5, 3).unwrap();
        let tail = (6..=20).map(|i| 10f64.powi(-2 * i)).sum::<f64>().sqrt();
        assert!((gone - tail).abs() <= 1e-12 * tail);
        assert_eq!(y5.rank(), 5);
        assert!(y5.u.iter().all(|z| z.im == 0.0));
        let (again, _) = schrodinger_initial(20, 5, 3).unwrap();
        assert_eq!(again.u, y5.u);
        assert_eq!(again.v, y5.v);
    }
}
