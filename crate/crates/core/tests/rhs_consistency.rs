use dlra::lowrank::{gaussian_matrix, random_orthonormal};
use dlra::problems::{lattice_build, schrodinger_build, synthetic_exact, SyntheticKind};
use dlra::{MatrixOde, Scalar, SumFactorRhs};
use nalgebra::{Complex, DMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mismatch relative to the unprojected evaluation, which stays meaningful
/// when the projection cancels.
fn rel<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, scale: &DMatrix<T>) -> f64 {
    (a - b).norm() / b.norm().max(scale.norm()).max(f64::MIN_POSITIVE)
}

fn check<T: Scalar>(rhs: &SumFactorRhs<T>, seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = rhs.shape();
    let real = !T::IS_COMPLEX;
    let r = rng.random_range(1..=m.min(n).min(6));
    let t = rng.random_range(0.0..2.0);
    let u: DMatrix<T> = random_orthonormal(m, r, &mut rng, real).unwrap();
    let v: DMatrix<T> = random_orthonormal(n, r, &mut rng, real).unwrap();
    let k = gaussian_matrix::<T>(m, r, &mut rng, real);
    let l = gaussian_matrix::<T>(n, r, &mut rng, real);
    let s = gaussian_matrix::<T>(r, r, &mut rng, real);
    let cache = rhs.prepare(&u, &v).unwrap();

    let full_k = rhs.eval_full(t, &(&k * v.adjoint())).unwrap();
    let full_l = rhs.eval_full(t, &(&u * l.adjoint())).unwrap();
    let full_s = rhs.eval_full(t, &(&u * &s * v.adjoint())).unwrap();
    let fk = &full_k * &v;
    let fl = full_l.adjoint() * &u;
    let fs = u.adjoint() * &full_s * &v;
    prop_assert!(rel(&rhs.eval_k(t, &k, &v, &cache).unwrap(), &fk, &full_k) < 1e-12);
    prop_assert!(rel(&rhs.eval_l(t, &l, &u, &cache).unwrap(), &fl, &full_l) < 1e-12);
    prop_assert!(rel(&rhs.eval_s(t, &s, &u, &v, &cache).unwrap(), &fs, &full_s) < 1e-12);
    prop_assert!(rel(&rhs.eval_s_uncached(t, &s, &u, &v).unwrap(), &fs, &full_s) < 1e-12);

    let y1 = gaussian_matrix::<T>(m, n, &mut rng, real);
    let y2 = gaussian_matrix::<T>(m, n, &mut rng, real);
    let (a, b) = (T::from_parts(0.7, 0.0), T::from_parts(-1.3, 0.0));
    let lhs = rhs.eval_full(t, &(&y1 * a + &y2 * b)).unwrap();
    let zero = rhs.eval_full(t, &DMatrix::zeros(m, n)).unwrap();
    // affine maps: the constant term enters once on each side
    let rhs_sum = (rhs.eval_full(t, &y1).unwrap() - &zero) * a + (rhs.eval_full(t, &y2).unwrap() - &zero) * b + &zero;
    prop_assert!(rel(&lhs, &rhs_sum, &lhs) < 1e-12);
    let f1 = rhs.eval_full(t, &y1).unwrap();
    prop_assert!(rel(&rhs.eval_dense_reference(t, &y1), &f1, &f1) < 1e-12);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn schrodinger_projections(seed in 0u64..10_000) {
        check::<Complex<f64>>(&schrodinger_build(18).unwrap().rhs, seed)?;
    }

    #[test]
    fn lattice_projections(seed in 0u64..10_000) {
        check::<f64>(&lattice_build(14, 3).unwrap().rhs, seed)?;
    }

    #[test]
    fn synthetic_projections(seed in 0u64..10_000, kind in 0usize..3) {
        let kind = [SyntheticKind::Skew, SyntheticKind::TwoSided, SyntheticKind::ScalarExponential { a: -0.4 }][kind];
        check::<f64>(&synthetic_exact(16, 16, 3, kind, seed).unwrap().rhs, seed)?;
    }
}
