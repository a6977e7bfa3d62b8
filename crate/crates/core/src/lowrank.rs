//! Factorized low-rank states `Y = U S V^H` and the basic operations on them:
//! orthonormalization, SVD truncation, and the tangent-space projector.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, DlraError, Result};
use crate::scalar::{Field, Scalar};

/// Tolerance used when validating orthonormality of basis factors.
pub const ORTHO_TOL: f64 = 1e-12;

/// Rank-`r` factorization `Y = U S V^H` at time `t`.
///
/// `U` (m x r) and `V` (n x r) have orthonormal columns; `S` (r x r) is a
/// dense, generally non-diagonal coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankState<T: Scalar> {
    pub u: DMatrix<T>,
    pub s: DMatrix<T>,
    pub v: DMatrix<T>,
    pub t: f64,
}

impl<T: Scalar> LowRankState<T> {
    pub fn new(u: DMatrix<T>, s: DMatrix<T>, v: DMatrix<T>, t: f64) -> Result<Self> {
        let r = s.nrows();
        if s.ncols() != r {
            return Err(shape_err("LowRankState::new", "square S", s.shape()));
        }
        if u.ncols() != r || v.ncols() != r {
            return Err(DlraError::ShapeMismatch {
                op: "LowRankState::new",
                expected: format!("U and V with {r} columns"),
                got: format!("U {}x{}, V {}x{}", u.nrows(), u.ncols(), v.nrows(), v.ncols()),
            });
        }
        if r == 0 || r > u.nrows().min(v.nrows()) {
            return Err(DlraError::InvalidInput(format!(
                "rank {r} outside 1..={}",
                u.nrows().min(v.nrows())
            )));
        }
        let state = Self { u, s, v, t };
        state.validate()?;
        Ok(state)
    }

    pub(crate) fn from_parts_unchecked(u: DMatrix<T>, s: DMatrix<T>, v: DMatrix<T>, t: f64) -> Self {
        Self { u, s, v, t }
    }

    pub fn rank(&self) -> usize {
        self.s.nrows()
    }

    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v.nrows()
    }

    pub fn field(&self) -> Field {
        Field::of::<T>()
    }

    /// Frobenius norm of `U S V^H`, which equals `||S||_F`.
    pub fn norm(&self) -> f64 {
        self.s.norm()
    }

    pub fn dense(&self) -> DMatrix<T> {
        &self.u * &self.s * self.v.adjoint()
    }

    /// Checks the orthonormality invariants of both bases.
    pub fn validate(&self) -> Result<()> {
        if !all_finite(&self.u) || !all_finite(&self.s) || !all_finite(&self.v) {
            return Err(DlraError::Numerical("non-finite factor".into()));
        }
        let du = orthonormality_defect(&self.u);
        let dv = orthonormality_defect(&self.v);
        if du > ORTHO_TOL || dv > ORTHO_TOL {
            return Err(DlraError::Numerical(format!(
                "basis not orthonormal: |U^H U - I| = {du:.3e}, |V^H V - I| = {dv:.3e}"
            )));
        }
        Ok(())
    }
}

/// `||Q^H Q - I||_F`.
pub fn orthonormality_defect<T: Scalar>(q: &DMatrix<T>) -> f64 {
    let k = q.ncols();
    (q.adjoint() * q - DMatrix::<T>::identity(k, k)).norm()
}

pub fn all_finite<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.finite())
}

/// Conjugate-linear Frobenius inner product `trace(A^H B)`.
pub fn frobenius_inner<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.dotc(b)
}

/// Householder QR orthonormalization keeping all `k` columns of `Q`.
///
/// Columns beyond the numerical rank of `M` are still orthonormal, so the
/// output width is always `k`.
pub fn orth<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (rows, k) = m.shape();
    if k > rows {
        return Err(shape_err("orth", format!("at most {rows} columns"), m.shape()));
    }
    if !all_finite(m) {
        return Err(DlraError::InvalidInput("orth: non-finite entries".into()));
    }
    Ok(m.clone().qr().q())
}

/// Extends an orthonormal basis `old` by the span of `extra`.
///
/// Returns the new directions only: an orthonormal block orthogonal to `old`
/// with width `min(rows, old + extra) - old`, so that `[old, new]` is the
/// orthonormalization of `[old, extra]` with the leading block kept literally.
pub fn extend_basis<T: Scalar>(old: &DMatrix<T>, extra: &DMatrix<T>) -> Result<DMatrix<T>> {
    let rows = old.nrows();
    if extra.nrows() != rows {
        return Err(shape_err("extend_basis", format!("{rows} rows"), extra.shape()));
    }
    if !all_finite(extra) {
        return Err(DlraError::Numerical("extend_basis: non-finite directions".into()));
    }
    let k_old = old.ncols();
    let k = (k_old + extra.ncols()).min(rows);
    let mut cat = DMatrix::<T>::zeros(rows, k_old + extra.ncols());
    cat.columns_mut(0, k_old).copy_from(old);
    cat.columns_mut(k_old, extra.ncols()).copy_from(extra);
    let q = cat.qr().q();
    Ok(q.columns(k_old, k - k_old).into_owned())
}

/// Horizontal concatenation `[a, b]`.
/// `out += alpha * x`.
pub fn add_scaled<T: Scalar>(out: &mut DMatrix<T>, alpha: T, x: &DMatrix<T>) {
    out.zip_apply(x, |o, v| *o += alpha * v);
}

pub fn hcat<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::<T>::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationMode {
    /// Keep the minimal rank whose discarded singular tail is at most `theta`.
    Tolerance { theta: f64 },
    /// Keep `min(rank, available)` singular values.
    FixedRank { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy {
    pub mode: TruncationMode,
    pub r_min: usize,
    /// `None` means `min(m, n)`, i.e. bounded only by the available rank.
    pub r_max: Option<usize>,
}

impl TruncationPolicy {
    pub fn tolerance(theta: f64) -> Self {
        Self {
            mode: TruncationMode::Tolerance { theta },
            r_min: 1,
            r_max: None,
        }
    }

    pub fn fixed_rank(rank: usize) -> Self {
        Self {
            mode: TruncationMode::FixedRank { rank },
            r_min: 1,
            r_max: None,
        }
    }

    pub fn with_bounds(mut self, r_min: usize, r_max: Option<usize>) -> Self {
        self.r_min = r_min;
        self.r_max = r_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TruncationMode::Tolerance { theta } if !(theta >= 0.0) => {
                return Err(DlraError::Policy(format!("tolerance {theta} must be >= 0")))
            }
            TruncationMode::FixedRank { rank: 0 } => {
                return Err(DlraError::Policy("target rank must be positive".into()))
            }
            _ => {}
        }
        if self.r_min == 0 {
            return Err(DlraError::Policy("r_min must be >= 1".into()));
        }
        if let Some(r_max) = self.r_max {
            if r_max < self.r_min {
                return Err(DlraError::Policy(format!("r_max {r_max} < r_min {}", self.r_min)));
            }
        }
        Ok(())
    }

    /// Chooses the retained rank for a descending singular spectrum.
    pub fn select_rank(&self, sigma: &[f64]) -> usize {
        let available = sigma.len();
        match self.mode {
            TruncationMode::FixedRank { rank } => rank.min(available),
            TruncationMode::Tolerance { theta } => {
                // tail[k] = sum_{j >= k} sigma_j^2
                let mut tail = vec![0.0; available + 1];
                for j in (0..available).rev() {
                    tail[j] = tail[j + 1] + sigma[j] * sigma[j];
                }
                let theta_sq = theta * theta;
                let minimal = (0..=available).find(|&k| tail[k] <= theta_sq).unwrap_or(available);
                let hi = self.r_max.unwrap_or(available).min(available);
                let lo = self.r_min.min(hi);
                minimal.clamp(lo, hi)
            }
        }
    }
}

/// Outcome of [`truncate`].
#[derive(Debug, Clone)]
pub struct Truncation<T: Scalar> {
    pub state: LowRankState<T>,
    /// Number of singular values before truncation.
    pub full_rank: usize,
    /// `(sum_{j > r1} sigma_j^2)^{1/2}`, the Frobenius distance between the
    /// untruncated and truncated matrices.
    pub discarded: f64,
    pub singular_values: Vec<f64>,
}

/// Truncates `U_hat S_hat V_hat^H` via the SVD of the small coefficient matrix.
///
/// `S_hat` may be rectangular; the bases must match its shape.
pub fn truncate<T: Scalar>(
    u_hat: &DMatrix<T>,
    s_hat: &DMatrix<T>,
    v_hat: &DMatrix<T>,
    policy: &TruncationPolicy,
    t: f64,
) -> Result<Truncation<T>> {
    policy.validate()?;
    if u_hat.ncols() != s_hat.nrows() || v_hat.ncols() != s_hat.ncols() {
        return Err(DlraError::ShapeMismatch {
            op: "truncate",
            expected: format!("S_hat {}x{}", u_hat.ncols(), v_hat.ncols()),
            got: format!("{}x{}", s_hat.nrows(), s_hat.ncols()),
        });
    }
    if !all_finite(s_hat) {
        return Err(DlraError::Numerical("truncate: non-finite coefficient matrix".into()));
    }
    let svd = s_hat.clone().svd(true, true);
    let p = svd.u.ok_or_else(|| DlraError::Numerical("SVD did not return U".into()))?;
    let q_t = svd.v_t.ok_or_else(|| DlraError::Numerical("SVD did not return V^H".into()))?;
    let raw = svd.singular_values;
    if raw.iter().any(|s| !s.is_finite()) {
        return Err(DlraError::Numerical("SVD produced non-finite singular values".into()));
    }

    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let sigma: Vec<f64> = order.iter().map(|&j| raw[j]).collect();

    let r1 = policy.select_rank(&sigma);
    if r1 == 0 {
        return Err(DlraError::Policy("truncation would produce rank 0".into()));
    }
    let discarded = sigma[r1..].iter().map(|s| s * s).sum::<f64>().sqrt();

    let mut p1 = DMatrix::<T>::zeros(p.nrows(), r1);
    let mut q1 = DMatrix::<T>::zeros(q_t.ncols(), r1);
    for (dst, &src) in order.iter().take(r1).enumerate() {
        p1.set_column(dst, &p.column(src));
        q1.set_column(dst, &q_t.row(src).adjoint());
    }
    let s1 = DMatrix::<T>::from_fn(r1, r1, |i, j| {
        if i == j {
            T::from_real(sigma[i])
        } else {
            T::zero()
        }
    });
    let u1 = u_hat * p1;
    let v1 = v_hat * q1;
    Ok(Truncation {
        state: LowRankState::from_parts_unchecked(u1, s1, v1, t),
        full_rank: sigma.len(),
        discarded,
        singular_values: sigma,
    })
}

/// Orthogonal projection onto the tangent space at `x`:
/// `P(X) Z = U U^H Z (I - V V^H) + Z V V^H`.
pub fn tangent_project<T: Scalar>(x: &LowRankState<T>, z: &DMatrix<T>) -> Result<DMatrix<T>> {
    if z.shape() != (x.nrows(), x.ncols()) {
        return Err(shape_err(
            "tangent_project",
            format!("{}x{}", x.nrows(), x.ncols()),
            z.shape(),
        ));
    }
    let uh_z = x.u.adjoint() * z;
    let zv = z * &x.v;
    let uh_zv = &uh_z * &x.v;
    let vh = x.v.adjoint();
    Ok(&x.u * uh_z - &x.u * uh_zv * &vh + zv * vh)
}

/// `||Z - P(X) Z||_F`, the size of the component normal to the tangent space.
pub fn normal_component_norm<T: Scalar>(x: &LowRankState<T>, z: &DMatrix<T>) -> Result<f64> {
    let pz = tangent_project(x, z)?;
    Ok((z - pz).norm())
}

/// Singular values assigned by [`random_lowrank`].
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SingularValueLaw {
    /// `sigma_i = 10^{-i}`, `i = 1..=r`.
    #[default]
    PowersOfTen,
    /// `sigma_i = q^i` for a ratio `0 < q < 1`.
    Geometric(f64),
    Explicit(Vec<f64>),
}

impl SingularValueLaw {
    pub fn values(&self, r: usize) -> Result<Vec<f64>> {
        match self {
            SingularValueLaw::PowersOfTen => Ok((1..=r).map(|i| 10f64.powi(-(i as i32))).collect()),
            SingularValueLaw::Geometric(q) => Ok((1..=r).map(|i| q.powi(i as i32)).collect()),
            SingularValueLaw::Explicit(v) if v.len() == r => Ok(v.clone()),
            SingularValueLaw::Explicit(v) => Err(DlraError::InvalidInput(format!(
                "{} singular values given for rank {r}",
                v.len()
            ))),
        }
    }
}

/// Seeded Gaussian `rows x cols` matrix; complex fields get complex entries
/// unless `real_only` is set.
pub fn gaussian_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng, real_only: bool) -> DMatrix<T> {
    // Column-major fill keeps the draw order independent of nalgebra internals.
    let mut out = DMatrix::<T>::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = if T::IS_COMPLEX && !real_only {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            out[(i, j)] = T::from_parts(re, im);
        }
    }
    out
}

pub fn random_orthonormal<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng, real_only: bool) -> Result<DMatrix<T>> {
    orth(&gaussian_matrix::<T>(rows, cols, rng, real_only))
}

/// Deterministic random rank-`r` state with orthonormal Gaussian bases and a
/// diagonal coefficient matrix following `law`.
pub fn random_lowrank<T: Scalar>(
    m: usize,
    n: usize,
    r: usize,
    seed: u64,
    law: &SingularValueLaw,
) -> Result<LowRankState<T>> {
    if r == 0 || r > m.min(n) {
        return Err(DlraError::InvalidInput(format!("rank {r} invalid for {m}x{n}")));
    }
    let sigma = law.values(r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthonormal::<T>(m, r, &mut rng, false)?;
    let v = random_orthonormal::<T>(n, r, &mut rng, false)?;
    let s = DMatrix::<T>::from_fn(r, r, |i, j| if i == j { T::from_real(sigma[i]) } else { T::zero() });
    LowRankState::new(u, s, v, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Complex, DVector};
    use proptest::prelude::*;

    type C = Complex<f64>;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Projector onto the tangent space assembled from an explicit basis of
    /// `span{u_i w^H} + span{w v_j^H}` in vectorized form.
    fn brute_force_tangent<T: Scalar>(x: &LowRankState<T>, z: &DMatrix<T>) -> DMatrix<T> {
        let (m, n, r) = (x.nrows(), x.ncols(), x.rank());
        let mut span = Vec::new();
        for i in 0..r {
            for k in 0..n {
                let mut e = DMatrix::<T>::zeros(m, n);
                for a in 0..m {
                    e[(a, k)] = x.u[(a, i)];
                }
                span.push(e);
            }
        }
        for j in 0..r {
            for k in 0..m {
                let mut e = DMatrix::<T>::zeros(m, n);
                for b in 0..n {
                    e[(k, b)] = x.v[(b, j)].conjugate();
                }
                span.push(e);
            }
        }
        let cols: Vec<DVector<T>> = span.iter().map(|e| DVector::from_column_slice(e.as_slice())).collect();
        let a = DMatrix::from_columns(&cols);
        let svd = a.svd(true, false);
        let basis_u = svd.u.unwrap();
        let dim = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(dim, r * n + m * r - r * r);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&p, &q| svd.singular_values[q].total_cmp(&svd.singular_values[p]));
        let b = DMatrix::from_columns(&order[..dim].iter().map(|&j| basis_u.column(j).into_owned()).collect::<Vec<_>>());
        let zv = DVector::from_column_slice(z.as_slice());
        let proj = &b * (b.adjoint() * zv);
        DMatrix::from_column_slice(m, n, proj.as_slice())
    }

    #[test]
    fn orth_identity() {
        let q = orth(&DMatrix::<f64>::identity(3, 3)).unwrap();
        assert!(orthonormality_defect(&q) < 1e-14);
        // range(Q) = range(I): Q is square and unitary
        assert!((q.determinant().abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orth_duplicated_column_keeps_width() {
        let v = orth(&gaussian_matrix::<f64>(6, 1, &mut rng(1), false)).unwrap();
        let q = orth(&hcat(&v, &v)).unwrap();
        assert_eq!(q.ncols(), 2);
        assert!(orthonormality_defect(&q) < 1e-14);
        let overlap = (q.column(0).adjoint() * &v)[(0, 0)].abs();
        assert!((overlap - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orth_reproduces_range() {
        let m = gaussian_matrix::<f64>(100, 5, &mut rng(2), false);
        let q = orth(&m).unwrap();
        let resid = (&q * (q.adjoint() * &m) - &m).norm();
        assert!(resid <= 1e-10 * m.norm());
    }

    #[test]
    fn orth_rejects_bad_input() {
        let mut m = DMatrix::<f64>::identity(3, 2);
        m[(0, 0)] = f64::NAN;
        assert!(orth(&m).is_err());
        assert!(orth(&DMatrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn extend_basis_keeps_old_block() {
        let old = random_orthonormal::<C>(10, 3, &mut rng(3), false).unwrap();
        let extra = gaussian_matrix::<C>(10, 4, &mut rng(4), false);
        let new = extend_basis(&old, &extra).unwrap();
        assert_eq!(new.ncols(), 4);
        let full = hcat(&old, &new);
        assert!(orthonormality_defect(&full) < 1e-13);
        let resid = (&full * (full.adjoint() * &extra) - &extra).norm();
        assert!(resid < 1e-12 * extra.norm());
        // capped at the ambient dimension
        let wide = extend_basis(&old, &gaussian_matrix::<C>(10, 9, &mut rng(5), false)).unwrap();
        assert_eq!(wide.ncols(), 7);
    }

    #[test]
    fn truncate_drops_tiny_value() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1e-12]));
        let eye = DMatrix::<f64>::identity(3, 3);
        let tr = truncate(&eye, &s, &eye, &TruncationPolicy::tolerance(1e-6), 0.0).unwrap();
        assert_eq!(tr.state.rank(), 2);
        assert!((tr.discarded - 1e-12).abs() < 1e-24);
    }

    #[test]
    fn truncate_single_value_lossless() {
        let u = random_orthonormal::<f64>(5, 1, &mut rng(6), false).unwrap();
        let v = random_orthonormal::<f64>(4, 1, &mut rng(7), false).unwrap();
        let s = DMatrix::from_element(1, 1, 1.0);
        let tr = truncate(&u, &s, &v, &TruncationPolicy::tolerance(0.0), 0.0).unwrap();
        assert_eq!(tr.state.rank(), 1);
        assert!((tr.state.dense() - &u * &s * v.adjoint()).norm() < 1e-15);
    }

    #[test]
    fn truncate_matches_tail_scan() {
        let s = gaussian_matrix::<f64>(8, 8, &mut rng(8), false) * 0.05;
        let eye = DMatrix::<f64>::identity(8, 8);
        let theta = 0.1;
        let tr = truncate(&eye, &s, &eye, &TruncationPolicy::tolerance(theta), 0.0).unwrap();
        let mut sig: Vec<f64> = s.clone().svd(false, false).singular_values.iter().copied().collect();
        sig.sort_by(|a, b| b.total_cmp(a));
        let mut expected = None;
        for r in 0..=8 {
            let tail: f64 = sig[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if tail <= theta {
                expected = Some(r.max(1));
                break;
            }
        }
        assert_eq!(tr.state.rank(), expected.unwrap());
        let err = (tr.state.dense() - &s).norm();
        assert!((err - tr.discarded).abs() < 1e-13);
    }

    #[test]
    fn truncate_all_zero_clamps_to_r_min() {
        let z = DMatrix::<f64>::zeros(4, 4);
        let eye = DMatrix::<f64>::identity(4, 4);
        let tr = truncate(&eye, &z, &eye, &TruncationPolicy::tolerance(1e-3), 0.0).unwrap();
        assert_eq!(tr.state.rank(), 1);
        let bounded = TruncationPolicy::tolerance(0.0).with_bounds(1, Some(2));
        let tr = truncate(&eye, &DMatrix::<f64>::identity(4, 4), &eye, &bounded, 0.0).unwrap();
        assert_eq!(tr.state.rank(), 2);
        assert!((tr.discarded - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn truncate_fixed_rank_and_rectangular() {
        let u = random_orthonormal::<C>(9, 4, &mut rng(9), false).unwrap();
        let v = random_orthonormal::<C>(7, 3, &mut rng(10), false).unwrap();
        let s = gaussian_matrix::<C>(4, 3, &mut rng(11), false);
        let tr = truncate(&u, &s, &v, &TruncationPolicy::fixed_rank(5), 1.5).unwrap();
        assert_eq!(tr.state.rank(), 3);
        assert_eq!(tr.state.t, 1.5);
        assert!((tr.state.dense() - &u * &s * v.adjoint()).norm() < 1e-13 * s.norm());
        tr.state.validate().unwrap();
    }

    #[test]
    fn policy_validation() {
        assert!(TruncationPolicy::tolerance(-1.0).validate().is_err());
        assert!(TruncationPolicy::fixed_rank(0).validate().is_err());
        assert!(TruncationPolicy::tolerance(0.1).with_bounds(3, Some(2)).validate().is_err());
        assert!(TruncationPolicy::tolerance(0.1).with_bounds(0, None).validate().is_err());
    }

    #[test]
    fn tangent_contains_point() {
        let x = random_lowrank::<C>(12, 9, 3, 1, &SingularValueLaw::Geometric(0.5)).unwrap();
        let y = x.dense();
        let py = tangent_project(&x, &y).unwrap();
        assert!((py - &y).norm() < 1e-14);
    }

    #[test]
    fn tangent_kills_normal_block() {
        let x = random_lowrank::<f64>(10, 8, 2, 2, &SingularValueLaw::PowersOfTen).unwrap();
        let w = gaussian_matrix::<f64>(10, 8, &mut rng(12), false);
        let pu = DMatrix::<f64>::identity(10, 10) - &x.u * x.u.adjoint();
        let pv = DMatrix::<f64>::identity(8, 8) - &x.v * x.v.adjoint();
        let normal = &pu * w * &pv;
        assert!(tangent_project(&x, &normal).unwrap().norm() < 1e-14 * normal.norm());
        assert!((normal_component_norm(&x, &normal).unwrap() - normal.norm()).abs() < 1e-13);
        let tangent = x.dense();
        let z = &tangent + &normal;
        assert!((normal_component_norm(&x, &z).unwrap() - normal.norm()).abs() < 1e-13);
        assert!(normal_component_norm(&x, &tangent).unwrap() < 1e-14);
    }

    #[test]
    fn tangent_matches_explicit_basis() {
        let x = random_lowrank::<f64>(20, 20, 3, 3, &SingularValueLaw::PowersOfTen).unwrap();
        let z = gaussian_matrix::<f64>(20, 20, &mut rng(13), false);
        let fast = tangent_project(&x, &z).unwrap();
        let slow = brute_force_tangent(&x, &z);
        assert!((fast - slow).norm() < 1e-11 * z.norm());

        let xc = random_lowrank::<C>(7, 6, 2, 4, &SingularValueLaw::PowersOfTen).unwrap();
        let zc = gaussian_matrix::<C>(7, 6, &mut rng(14), false);
        let slow = brute_force_tangent(&xc, &zc);
        assert!((tangent_project(&xc, &zc).unwrap() - slow).norm() < 1e-11 * zc.norm());
    }

    #[test]
    fn tangent_rejects_shape() {
        let x = random_lowrank::<f64>(5, 4, 2, 5, &SingularValueLaw::PowersOfTen).unwrap();
        assert!(tangent_project(&x, &DMatrix::zeros(4, 5)).is_err());
        assert!(normal_component_norm(&x, &DMatrix::zeros(5, 5)).is_err());
    }

    #[test]
    fn random_lowrank_default_law_and_determinism() {
        let a = random_lowrank::<f64>(10, 8, 3, 42, &SingularValueLaw::default()).unwrap();
        let b = random_lowrank::<f64>(10, 8, 3, 42, &SingularValueLaw::default()).unwrap();
        assert_eq!(a, b);
        let d: Vec<f64> = a.s.diagonal().iter().copied().collect();
        assert_eq!(d, vec![1e-1, 1e-2, 1e-3]);
        a.validate().unwrap();
        assert!(random_lowrank::<f64>(3, 8, 4, 1, &SingularValueLaw::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn orth_output_orthonormal(seed in 0u64..1000, rows in 2usize..30, cols in 1usize..6) {
            let cols = cols.min(rows);
            let m = gaussian_matrix::<C>(rows, cols, &mut rng(seed), false);
            let q = orth(&m).unwrap();
            prop_assert!(orthonormality_defect(&q) <= ORTHO_TOL);
        }

        #[test]
        fn projector_idempotent_and_self_adjoint(seed in 0u64..1000) {
            let x = random_lowrank::<C>(20, 20, 3, seed, &SingularValueLaw::Geometric(0.3)).unwrap();
            let mut r = rng(seed + 1);
            let z1 = gaussian_matrix::<C>(20, 20, &mut r, false);
            let z2 = gaussian_matrix::<C>(20, 20, &mut r, false);
            let p1 = tangent_project(&x, &z1).unwrap();
            let pp1 = tangent_project(&x, &p1).unwrap();
            prop_assert!((&pp1 - &p1).norm() <= 1e-12 * z1.norm());
            let p2 = tangent_project(&x, &z2).unwrap();
            let lhs = frobenius_inner(&p1, &z2);
            let rhs = frobenius_inner(&z1, &p2);
            prop_assert!((lhs - rhs).norm() <= 1e-10 * z1.norm() * z2.norm());
            let n = normal_component_norm(&x, &z1).unwrap();
            let pyth = p1.norm_squared() + n * n;
            prop_assert!((pyth - z1.norm_squared()).abs() <= 1e-10 * z1.norm_squared());
        }

        #[test]
        fn lossless_truncation(seed in 0u64..1000, k in 1usize..9) {
            let mut r = rng(seed);
            let u = random_orthonormal::<f64>(12, k, &mut r, false).unwrap();
            let v = random_orthonormal::<f64>(11, k, &mut r, false).unwrap();
            let s = gaussian_matrix::<f64>(k, k, &mut r, false);
            let pol = TruncationPolicy::tolerance(0.0).with_bounds(1, Some(k));
            let tr = truncate(&u, &s, &v, &pol, 0.0).unwrap();
            prop_assert!((tr.state.dense() - &u * &s * v.adjoint()).norm() <= 1e-12 * s.norm());
            prop_assert!(orthonormality_defect(&tr.state.u) <= ORTHO_TOL);
            prop_assert!(orthonormality_defect(&tr.state.v) <= ORTHO_TOL);
        }
    }
}
