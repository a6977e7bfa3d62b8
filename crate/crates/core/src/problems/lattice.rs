//! Two-dimensional lattice benchmark for the P_N moment system on `[0, 7]^2`.
//!
//! Unknowns are `Y[cell, moment]` with `cell = ix + n_xy * iy`. The semi-discrete
//! system is
//!
//! ```text
//! dY/dt = -Dx Y Ax - Dy Y Ay + Dx_stab Y |Ax| + Dy_stab Y |Ay|
//!         - diag(sigma_a) Y + diag(sigma_s) Y G + sqrt(4 pi) Q e0^T
//! ```
//!
//! where `Dx` is the central difference, `Dx_stab` the scaled second
//! difference, and zero ghost cells close the boundary. Together the flux
//! terms form a first-order upwind scheme.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DlraError, Result};
use crate::lowrank::{gaussian_matrix, hcat, orth, LowRankState};
use crate::problems::pn::{pn_flux_matrices, PnMatrices};
use crate::rhs::{FactorTerm, SumFactorRhs};
use crate::sparse::CsrMatrix;

pub const BLOCKS: usize = 7;
pub const DOMAIN: f64 = 7.0;
/// Isotropic background density at `t = 0`.
pub const BACKGROUND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub sigma_s: f64,
    pub sigma_a: f64,
    pub q: f64,
}

impl Material {
    pub const SCATTERER: Material = Material { sigma_s: 1.0, sigma_a: 0.0, q: 0.0 };
    pub const ABSORBER: Material = Material { sigma_s: 0.0, sigma_a: 10.0, q: 0.0 };
    pub const SOURCE: Material = Material { sigma_s: 0.0, sigma_a: 10.0, q: 1.0 };

    pub fn sigma_t(&self) -> f64 {
        self.sigma_s + self.sigma_a
    }
}

/// Materials of the 7 x 7 unit blocks, indexed `[bx][by]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeLayout {
    pub blocks: [[Material; BLOCKS]; BLOCKS],
}

impl Default for LatticeLayout {
    fn default() -> Self {
        Self::standard()
    }
}

impl LatticeLayout {
    /// Absorbers on `{1 <= i, j <= 5, i + j even}` except the centre, which
    /// holds the source.
    pub fn standard() -> Self {
        let mut blocks = [[Material::SCATTERER; BLOCKS]; BLOCKS];
        for (i, col) in blocks.iter_mut().enumerate() {
            for (j, b) in col.iter_mut().enumerate() {
                if (1..=5).contains(&i) && (1..=5).contains(&j) && (i + j) % 2 == 0 {
                    *b = Material::ABSORBER;
                }
            }
        }
        blocks[3][3] = Material::SOURCE;
        Self { blocks }
    }

    pub fn uniform(m: Material) -> Self {
        Self { blocks: [[m; BLOCKS]; BLOCKS] }
    }

    /// Applies override lines `block_x block_y sigma_s sigma_a Q` (`#` comments).
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| DlraError::Parse { line: lineno + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(err("expected `block_x block_y sigma_s sigma_a Q`"));
            }
            let bx: usize = f[0].parse().map_err(|_| err("bad block index"))?;
            let by: usize = f[1].parse().map_err(|_| err("bad block index"))?;
            if bx >= BLOCKS || by >= BLOCKS {
                return Err(err("block index outside 0..7"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            let m = Material { sigma_s: num(f[2])?, sigma_a: num(f[3])?, q: num(f[4])? };
            if m.sigma_s < 0.0 || m.sigma_a < 0.0 || !m.q.is_finite() {
                return Err(err("cross sections must be non-negative"));
            }
            self.blocks[bx][by] = m;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LatticeProblem {
    pub n_xy: usize,
    pub dx: f64,
    pub layout: LatticeLayout,
    pub pn: PnMatrices,
    /// Per-cell fields, `cell = ix + n_xy * iy`.
    pub sigma_s: Vec<f64>,
    pub sigma_a: Vec<f64>,
    pub q: Vec<f64>,
    pub rhs: SumFactorRhs<f64>,
}

impl LatticeProblem {
    pub fn cells(&self) -> usize {
        self.n_xy * self.n_xy
    }

    pub fn moments(&self) -> usize {
        self.pn.moments()
    }

    pub fn cell(&self, ix: usize, iy: usize) -> usize {
        ix + self.n_xy * iy
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        ((ix as f64 + 0.5) * self.dx, (iy as f64 + 0.5) * self.dx)
    }

    pub fn block_of(&self, ix: usize, iy: usize) -> (usize, usize) {
        let per = self.n_xy / BLOCKS;
        (ix / per, iy / per)
    }

    pub fn sigma_t(&self) -> Vec<f64> {
        self.sigma_s.iter().zip(&self.sigma_a).map(|(s, a)| s + a).collect()
    }

    /// Macro step `cfl * dx`.
    pub fn time_step(&self, cfl: f64) -> f64 {
        cfl * self.dx
    }
}

/// 1D operators on `n` cells with zero ghost values: central difference
/// `(y+ - y-) / (2 dx)` and stabilization `(y+ - 2 y + y-) / (2 dx)`.
fn one_d_operators(n: usize, dx: f64) -> (Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>) {
    let mut central = Vec::new();
    let mut stab = Vec::new();
    let c = 1.0 / (2.0 * dx);
    for i in 0..n {
        stab.push((i, i, -2.0 * c));
        if i + 1 < n {
            central.push((i, i + 1, c));
            stab.push((i, i + 1, c));
        }
        if i > 0 {
            central.push((i, i - 1, -c));
            stab.push((i, i - 1, c));
        }
    }
    (central, stab)
}

/// Lifts a 1D stencil along x (`along_x`) or y to the flattened grid.
fn lift(n: usize, stencil: &[(usize, usize, f64)], along_x: bool) -> Result<CsrMatrix<f64>> {
    let mut trip = Vec::with_capacity(stencil.len() * n);
    for other in 0..n {
        for &(i, j, v) in stencil {
            let (row, col) = if along_x { (i + n * other, j + n * other) } else { (other + n * i, other + n * j) };
            trip.push((row, col, v));
        }
    }
    CsrMatrix::from_triplets(n * n, n * n, &trip)
}

pub fn lattice_build(n_xy: usize, order: usize) -> Result<LatticeProblem> {
    lattice_build_with(n_xy, order, LatticeLayout::standard())
}

pub fn lattice_build_with(n_xy: usize, order: usize, layout: LatticeLayout) -> Result<LatticeProblem> {
    if n_xy == 0 || !n_xy.is_multiple_of(BLOCKS) {
        return Err(DlraError::InvalidInput(format!("grid size {n_xy} must be a positive multiple of {BLOCKS}")));
    }
    let pn = pn_flux_matrices(order)?;
    let dx = DOMAIN / n_xy as f64;
    let per = n_xy / BLOCKS;
    let cells = n_xy * n_xy;
    let (mut sigma_s, mut sigma_a, mut q) = (vec![0.0; cells], vec![0.0; cells], vec![0.0; cells]);
    for iy in 0..n_xy {
        for ix in 0..n_xy {
            let m = layout.blocks[ix / per][iy / per];
            let c = ix + n_xy * iy;
            sigma_s[c] = m.sigma_s;
            sigma_a[c] = m.sigma_a;
            q[c] = m.q;
        }
    }

    let (central, stab) = one_d_operators(n_xy, dx);
    let dx_op = lift(n_xy, &central, true)?;
    let dy_op = lift(n_xy, &central, false)?;
    let dx_stab = lift(n_xy, &stab, true)?;
    let dy_stab = lift(n_xy, &stab, false)?;
    let sparse = |a: &DMatrix<f64>| CsrMatrix::from_dense(a, 1e-15);
    let moments = pn.moments();

    let mut rhs = SumFactorRhs::new(cells, moments);
    rhs.add_term(FactorTerm::new(dx_op.scaled(-1.0), sparse(&pn.ax)))?;
    rhs.add_term(FactorTerm::new(dy_op.scaled(-1.0), sparse(&pn.ay)))?;
    rhs.add_term(FactorTerm::new(dx_stab, sparse(&pn.abs_ax)))?;
    rhs.add_term(FactorTerm::new(dy_stab, sparse(&pn.abs_ay)))?;
    if sigma_a.iter().any(|&s| s != 0.0) {
        let neg: Vec<f64> = sigma_a.iter().map(|s| -s).collect();
        rhs.add_term(FactorTerm::new(CsrMatrix::diagonal(&neg), CsrMatrix::identity(moments)))?;
    }
    if sigma_s.iter().any(|&s| s != 0.0) {
        rhs.add_term(FactorTerm::new(CsrMatrix::diagonal(&sigma_s), CsrMatrix::diagonal(&pn.g)))?;
    }
    if q.iter().any(|&x| x != 0.0) {
        let src = DVector::from_iterator(cells, q.iter().map(|x| x * (4.0 * std::f64::consts::PI).sqrt()));
        let mut e0 = DVector::zeros(moments);
        e0[0] = 1.0;
        rhs.add_source(src, e0)?;
    }
    Ok(LatticeProblem { n_xy, dx, layout, pn, sigma_s, sigma_a, q, rhs })
}

/// Rank-`r` factorization of the isotropic background state; the extra
/// directions carry zero singular values.
pub fn lattice_initial(problem: &LatticeProblem, r: usize, seed: u64) -> Result<LowRankState<f64>> {
    let (cells, moments) = (problem.cells(), problem.moments());
    if r == 0 || r > cells.min(moments) {
        return Err(DlraError::InvalidInput(format!("rank {r} invalid for {cells}x{moments}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_element(cells, 1, BACKGROUND * (4.0 * std::f64::consts::PI).sqrt());
    let mut b = DMatrix::zeros(moments, 1);
    b[(0, 0)] = 1.0;
    let u = orth(&hcat(&a, &gaussian_matrix::<f64>(cells, r - 1, &mut rng, true)))?;
    let v = orth(&hcat(&b, &gaussian_matrix::<f64>(moments, r - 1, &mut rng, true)))?;
    let s = (u.transpose() * &a) * (b.transpose() * &v);
    LowRankState::new(u, s, v, 0.0)
}

/// `Phi[(ix, iy)] = sqrt(4 pi) Y[cell, 0]`.
pub fn lattice_scalar_flux(y: &LowRankState<f64>, problem: &LatticeProblem) -> Result<DMatrix<f64>> {
    if y.nrows() != problem.cells() || y.ncols() != problem.moments() {
        return Err(DlraError::ShapeMismatch {
            op: "lattice_scalar_flux",
            expected: format!("{}x{}", problem.cells(), problem.moments()),
            got: format!("{}x{}", y.nrows(), y.ncols()),
        });
    }
    // Zeroth moment column without forming Y: U S (V^T e0).
    let v0 = y.v.row(0).transpose();
    let col = &y.u * (&y.s * v0);
    scalar_flux_from_column(col.as_slice(), problem.n_xy)
}

pub fn scalar_flux_from_column(col: &[f64], n_xy: usize) -> Result<DMatrix<f64>> {
    let scale = (4.0 * std::f64::consts::PI).sqrt();
    let phi = DMatrix::from_fn(n_xy, n_xy, |ix, iy| scale * col[ix + n_xy * iy]);
    if phi.iter().any(|x| !x.is_finite()) {
        return Err(DlraError::Numerical("non-finite scalar flux".into()));
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::LowRankState;
    use crate::problems::pn::{real_harmonics, sphere_quadrature};
    use crate::rhs::MatrixOde;
    use crate::solver::{integrate, SolverConfig};

    #[test]
    fn layout_counts() {
        let p = lattice_build(14, 1).unwrap();
        let absorbers = (0..p.cells()).filter(|&c| p.sigma_a[c] == 10.0 && p.q[c] == 0.0).count();
        assert_eq!(absorbers, 12 * 4);
        let sources = (0..p.cells()).filter(|&c| p.q[c] == 1.0).count();
        assert_eq!(sources, 4);
        let st = p.sigma_t();
        for c in 0..p.cells() {
            assert_eq!(st[c], p.sigma_a[c] + p.sigma_s[c]);
        }
        assert!(lattice_build(15, 1).is_err());
    }

    #[test]
    fn overrides() {
        let mut l = LatticeLayout::standard();
        l.apply_overrides("# move the source\n3 3 1 0 0\n0 0 0 10 2\n").unwrap();
        assert_eq!(l.blocks[3][3], Material::SCATTERER);
        assert_eq!(l.blocks[0][0].q, 2.0);
        assert!(l.apply_overrides("9 0 1 0 0").is_err());
        assert!(l.apply_overrides("1 1 1 0").is_err());
    }

    #[test]
    fn structured_equals_dense() {
        let p = lattice_build(14, 3).unwrap();
        let y = gaussian_matrix::<f64>(p.cells(), p.moments(), &mut ChaCha8Rng::seed_from_u64(1), true);
        let a = p.rhs.eval_full(0.0, &y).unwrap();
        let b = p.rhs.eval_dense_reference(0.0, &y);
        assert!((&a - &b).norm() <= 1e-12 * b.norm());
    }

    #[test]
    fn scattering_keeps_zeroth_moment() {
        // Uniform scatterer, constant isotropic state: only boundary cells change.
        let p = lattice_build_with(7, 2, LatticeLayout::uniform(Material::SCATTERER)).unwrap();
        let mut y = DMatrix::zeros(p.cells(), p.moments());
        y.column_mut(0).fill(1.0);
        let f = p.rhs.eval_full(0.0, &y).unwrap();
        let interior = p.cell(3, 3);
        assert!(f.row(interior).amax() < 1e-12);
    }

    #[test]
    fn isotropic_flux() {
        let p = lattice_build(7, 1).unwrap();
        let y0 = lattice_initial(&p, 3, 0).unwrap();
        let phi = lattice_scalar_flux(&y0, &p).unwrap();
        let expect = 4.0 * std::f64::consts::PI * BACKGROUND;
        assert!(phi.iter().all(|x| (x - expect).abs() < 1e-12 * expect));
        assert_eq!(y0.rank(), 3);
        let zero = LowRankState::new(y0.u.clone(), DMatrix::zeros(3, 3), y0.v.clone(), 0.0).unwrap();
        assert!(lattice_scalar_flux(&zero, &p).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flux_matches_angular_quadrature() {
        let order = 3;
        let p = lattice_build(7, order).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = gaussian_matrix::<f64>(p.cells(), p.moments(), &mut rng, true);
        let col: Vec<f64> = y.column(0).iter().copied().collect();
        let phi = scalar_flux_from_column(&col, 7).unwrap();
        let quad = sphere_quadrature(order);
        for &(ix, iy) in &[(0, 0), (3, 5), (6, 2)] {
            let c = p.cell(ix, iy);
            let integral: f64 = quad
                .iter()
                .map(|&(mu, ph, w)| {
                    let r = real_harmonics(order, mu, ph);
                    w * (0..p.moments()).map(|k| y[(c, k)] * r[k]).sum::<f64>()
                })
                .sum();
            assert!((integral - phi[(ix, iy)]).abs() < 1e-8);
        }
    }

    #[test]
    fn pulse_advects_without_growth() {
        let vacuum = Material { sigma_s: 0.0, sigma_a: 0.0, q: 0.0 };
        let p = lattice_build_with(14, 1, LatticeLayout::uniform(vacuum)).unwrap();
        let mut y = DMatrix::zeros(p.cells(), p.moments());
        for iy in 0..14 {
            for ix in 0..14 {
                let (x, yy) = p.cell_center(ix, iy);
                y[(p.cell(ix, iy), 0)] = (-((x - 3.5).powi(2) + (yy - 3.5).powi(2))).exp();
            }
        }
        let h = p.time_step(0.5);
        let mut norms = vec![y.norm()];
        for k in 0..20 {
            let t = k as f64 * h;
            let (y1, _) = integrate(|t, y: &DMatrix<f64>| p.rhs.eval_full(t, y), &y, t, t + h, &SolverConfig::heun(1)).unwrap();
            y = y1;
            norms.push(y.norm());
        }
        assert!(norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{norms:?}");
        assert!(norms.last().unwrap() < &norms[0]);
    }
}
