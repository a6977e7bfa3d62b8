//! Spherical-harmonics moment matrices for the P_N transport closure.
//!
//! Moments are indexed by `k = l^2 + l + m` over real orthonormal harmonics
//! `R_{l,m}`, `0 <= l <= N`, `-l <= m <= l`.

use nalgebra::{Complex, DMatrix, SymmetricEigen};

use crate::error::{DlraError, Result};

type C = Complex<f64>;

#[derive(Debug, Clone)]
pub struct PnMatrices {
    pub order: usize,
    /// `int Omega_x R_k R_l dOmega`.
    pub ax: DMatrix<f64>,
    pub ay: DMatrix<f64>,
    pub abs_ax: DMatrix<f64>,
    pub abs_ay: DMatrix<f64>,
    /// Diagonal of the scattering operator: `0` for the zeroth moment, `-1` otherwise.
    pub g: Vec<f64>,
}

impl PnMatrices {
    pub fn moments(&self) -> usize {
        (self.order + 1) * (self.order + 1)
    }
}

pub fn moment_index(l: usize, m: i64) -> usize {
    idx(l, m)
}

fn idx(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// Complex multiplication operators `sin(theta) e^{+i phi}` and
/// `sin(theta) e^{-i phi}` on `Y_l^m` (Condon-Shortley phase), truncated at
/// degree `n`. Column `k'` holds the expansion of the product with `Y_{k'}`.
fn raising_lowering(n: usize) -> (DMatrix<C>, DMatrix<C>) {
    let size = (n + 1) * (n + 1);
    let mut plus = DMatrix::<C>::zeros(size, size);
    let mut minus = DMatrix::<C>::zeros(size, size);
    for l in 0..=n {
        let lf = l as f64;
        for m in -(l as i64)..=(l as i64) {
            let mf = m as f64;
            let col = idx(l, m);
            if l < n {
                let a = ((lf + mf + 1.0) * (lf + mf + 2.0) / ((2.0 * lf + 1.0) * (2.0 * lf + 3.0))).sqrt();
                plus[(idx(l + 1, m + 1), col)] += C::new(-a, 0.0);
                let g = ((lf - mf + 1.0) * (lf - mf + 2.0) / ((2.0 * lf + 1.0) * (2.0 * lf + 3.0))).sqrt();
                minus[(idx(l + 1, m - 1), col)] += C::new(g, 0.0);
            }
            if l >= 1 {
                if m < l as i64 - 1 {
                    let b = ((lf - mf) * (lf - mf - 1.0) / ((2.0 * lf - 1.0) * (2.0 * lf + 1.0))).sqrt();
                    plus[(idx(l - 1, m + 1), col)] += C::new(b, 0.0);
                }
                if m > -(l as i64 - 1) {
                    let d = ((lf + mf) * (lf + mf - 1.0) / ((2.0 * lf - 1.0) * (2.0 * lf + 1.0))).sqrt();
                    minus[(idx(l - 1, m - 1), col)] += C::new(-d, 0.0);
                }
            }
        }
    }
    (plus, minus)
}

/// `W` with `R_a = sum_k W[a, k] Y_k`.
fn real_from_complex(n: usize) -> DMatrix<C> {
    let size = (n + 1) * (n + 1);
    let mut w = DMatrix::<C>::zeros(size, size);
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    for l in 0..=n {
        w[(idx(l, 0), idx(l, 0))] = C::new(1.0, 0.0);
        for m in 1..=(l as i64) {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let (pos, neg) = (idx(l, m), idx(l, -m));
            w[(pos, pos)] = C::new(sign * r2, 0.0);
            w[(pos, neg)] = C::new(r2, 0.0);
            w[(neg, pos)] = C::new(0.0, -sign * r2);
            w[(neg, neg)] = C::new(0.0, r2);
        }
    }
    w
}

fn abs_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let abs = eig.eigenvalues.map(f64::abs);
    &eig.eigenvectors * DMatrix::from_diagonal(&abs) * eig.eigenvectors.transpose()
}

fn realify(a: &DMatrix<C>) -> Result<DMatrix<f64>> {
    let imag = a.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if imag > 1e-12 {
        return Err(DlraError::Numerical(format!("real-basis flux matrix has imaginary part {imag:e}")));
    }
    Ok(a.map(|z| z.re))
}

/// Flux matrices from the harmonic recursions, checked against product
/// quadrature to `1e-8`.
pub fn pn_flux_matrices(order: usize) -> Result<PnMatrices> {
    if order == 0 {
        return Err(DlraError::InvalidInput("moment order must be >= 1".into()));
    }
    let (plus, minus) = raising_lowering(order);
    let w = real_from_complex(order);
    let conj_w = w.map(|z| z.conj());
    let wt = w.transpose();
    let half = C::new(0.5, 0.0);
    let half_over_i = C::new(0.0, -0.5);
    let ax_c = (&plus + &minus) * half;
    let ay_c = (&plus - &minus) * half_over_i;
    let mut ax = realify(&(&conj_w * ax_c * &wt))?;
    let mut ay = realify(&(&conj_w * ay_c * &wt))?;
    // Drop rounding noise so structural zeros and symmetry are exact.
    for a in [&mut ax, &mut ay] {
        a.iter_mut().for_each(|x| {
            if x.abs() < 1e-14 {
                *x = 0.0
            }
        });
        let sym = (&*a + a.transpose()) * 0.5;
        *a = sym;
    }

    let (qx, qy) = quadrature_flux_matrices(order);
    let err = (&ax - &qx).amax().max((&ay - &qy).amax());
    if !(err <= 1e-8) {
        return Err(DlraError::Numerical(format!("P_{order} flux matrices disagree with quadrature by {err:e}")));
    }

    let mut abs_ax = abs_matrix(&ax);
    let mut abs_ay = abs_matrix(&ay);
    for a in [&mut abs_ax, &mut abs_ay] {
        let sym = (&*a + a.transpose()) * 0.5;
        *a = sym;
    }
    let moments = (order + 1) * (order + 1);
    let g = (0..moments).map(|k| if k == 0 { 0.0 } else { -1.0 }).collect();
    Ok(PnMatrices { order, ax, ay, abs_ax, abs_ay, g })
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Associated Legendre functions `P_l^m(mu)` without the Condon-Shortley
/// phase, scaled to orthonormal real harmonics: entry `[l][m]` is
/// `sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!) P_l^m(mu)`.
fn normalized_legendre(order: usize, mu: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - mu * mu).max(0.0).sqrt();
    let mut out = vec![vec![0.0; order + 1]; order + 1];
    // Normalized recursion avoids factorial growth.
    let mut pmm = (1.0 / (4.0 * std::f64::consts::PI)).sqrt();
    for m in 0..=order {
        if m > 0 {
            pmm *= s * ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
        }
        out[m][m] = pmm;
        if m < order {
            out[m + 1][m] = mu * ((2 * m + 3) as f64).sqrt() * pmm;
        }
        for l in (m + 2)..=order {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            out[l][m] = a * (mu * out[l - 1][m] - b * out[l - 2][m]);
        }
    }
    out
}

/// All real orthonormal harmonics up to degree `order` at `(mu, phi)`.
pub fn real_harmonics(order: usize, mu: f64, phi: f64) -> Vec<f64> {
    let p = normalized_legendre(order, mu);
    let mut out = vec![0.0; (order + 1) * (order + 1)];
    let r2 = std::f64::consts::SQRT_2;
    for l in 0..=order {
        out[idx(l, 0)] = p[l][0];
        for m in 1..=l {
            let mf = m as f64;
            out[idx(l, m as i64)] = r2 * p[l][m] * (mf * phi).cos();
            out[idx(l, -(m as i64))] = r2 * p[l][m] * (mf * phi).sin();
        }
    }
    out
}

/// Product quadrature on the sphere exact for harmonics of degree `<= 2 order + 1`:
/// `(mu, phi, weight)` triples.
pub fn sphere_quadrature(order: usize) -> Vec<(f64, f64, f64)> {
    let (mus, wmu) = gauss_legendre(order + 2);
    let nphi = 2 * order + 4;
    let dphi = 2.0 * std::f64::consts::PI / nphi as f64;
    let mut pts = Vec::with_capacity(mus.len() * nphi);
    for (&mu, &w) in mus.iter().zip(&wmu) {
        for j in 0..nphi {
            pts.push((mu, (j as f64 + 0.5) * dphi, w * dphi));
        }
    }
    pts
}

pub fn quadrature_flux_matrices(order: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let size = (order + 1) * (order + 1);
    let mut ax = DMatrix::<f64>::zeros(size, size);
    let mut ay = DMatrix::<f64>::zeros(size, size);
    for (mu, phi, w) in sphere_quadrature(order) {
        let r = real_harmonics(order, mu, phi);
        let s = (1.0 - mu * mu).sqrt();
        let (ox, oy) = (s * phi.cos(), s * phi.sin());
        for a in 0..size {
            for b in 0..size {
                let rr = w * r[a] * r[b];
                ax[(a, b)] += ox * rr;
                ay[(a, b)] += oy * rr;
            }
        }
    }
    (ax, ay)
}
