//! Right-hand sides `F(t, Y)` of matrix ODEs and their projected forms.
//!
//! All BUG-type substeps only ever need `F` through one of three projections:
//!
//! * K-step: `F(t, K V^H) V`
//! * L-step: `F(t, U L^H)^H U`
//! * S-step: `U^H F(t, U S V^H) V`
//!
//! [`SumFactorRhs`] evaluates these for `F(t, Y) = sum_l a_l(t) C_l Y D_l + G0`
//! without ever forming an `m x n` matrix.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, DlraError, Result};
use crate::lowrank::add_scaled;
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

/// A matrix ODE `dA/dt = F(t, A)` with `A` of shape `m x n`.
///
/// Implementations must be reentrant: the three substeps of a parallel
/// integrator call these methods concurrently. `Cache` holds whatever can be
/// precomputed for a fixed pair of projection bases; [`MatrixOde::prepare`] is
/// called once per basis pair and the cache is passed back to every projected
/// evaluation with those bases.
pub trait MatrixOde<T: Scalar>: Sync {
    type Cache: Send + Sync;

    fn shape(&self) -> (usize, usize);

    fn eval_full(&self, t: f64, y: &DMatrix<T>) -> Result<DMatrix<T>>;

    fn prepare(&self, u: &DMatrix<T>, v: &DMatrix<T>) -> Result<Self::Cache>;

    /// `F(t, K V^H) V`.
    fn eval_k(&self, t: f64, k: &DMatrix<T>, v: &DMatrix<T>, cache: &Self::Cache) -> Result<DMatrix<T>>;

    /// `F(t, U L^H)^H U`.
    fn eval_l(&self, t: f64, l: &DMatrix<T>, u: &DMatrix<T>, cache: &Self::Cache) -> Result<DMatrix<T>>;

    /// `U^H F(t, U S V^H) V`.
    fn eval_s(&self, t: f64, s: &DMatrix<T>, u: &DMatrix<T>, v: &DMatrix<T>, cache: &Self::Cache)
        -> Result<DMatrix<T>>;

    /// `U_out^H F(t, U_in S V_in^H) V_out`, used by the step-rejection estimate.
    fn eval_galerkin(
        &self,
        t: f64,
        s: &DMatrix<T>,
        input: (&DMatrix<T>, &DMatrix<T>),
        output: (&DMatrix<T>, &DMatrix<T>),
    ) -> Result<DMatrix<T>>;
}

fn check_shape<T2: Scalar>(op: &'static str, m: &DMatrix<T2>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        Err(shape_err(op, format!("{rows}x{cols}"), m.shape()))
    } else {
        Ok(())
    }
}

/// Dense right-hand side given as a closure; projections are computed by
/// composing with `eval_full`. Serves as the reference path in tests.
pub struct FnOde<T: Scalar, F> {
    m: usize,
    n: usize,
    f: F,
    _marker: std::marker::PhantomData<fn() -> T>,
}

impl<T: Scalar, F> FnOde<T, F>
where
    F: Fn(f64, &DMatrix<T>) -> DMatrix<T> + Sync,
{
    pub fn new(m: usize, n: usize, f: F) -> Self {
        Self { m, n, f, _marker: std::marker::PhantomData }
    }
}

impl<T: Scalar, F> MatrixOde<T> for FnOde<T, F>
where
    F: Fn(f64, &DMatrix<T>) -> DMatrix<T> + Sync,
{
    type Cache = ();

    fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    fn eval_full(&self, t: f64, y: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_shape("FnOde::eval_full", y, self.m, self.n)?;
        Ok((self.f)(t, y))
    }

    fn prepare(&self, _u: &DMatrix<T>, _v: &DMatrix<T>) -> Result<()> {
        Ok(())
    }

    fn eval_k(&self, t: f64, k: &DMatrix<T>, v: &DMatrix<T>, _: &()) -> Result<DMatrix<T>> {
        Ok(self.eval_full(t, &(k * v.adjoint()))? * v)
    }

    fn eval_l(&self, t: f64, l: &DMatrix<T>, u: &DMatrix<T>, _: &()) -> Result<DMatrix<T>> {
        Ok(self.eval_full(t, &(u * l.adjoint()))?.adjoint() * u)
    }

    fn eval_s(&self, t: f64, s: &DMatrix<T>, u: &DMatrix<T>, v: &DMatrix<T>, _: &()) -> Result<DMatrix<T>> {
        Ok(u.adjoint() * self.eval_full(t, &(u * s * v.adjoint()))? * v)
    }

    fn eval_galerkin(
        &self,
        t: f64,
        s: &DMatrix<T>,
        input: (&DMatrix<T>, &DMatrix<T>),
        output: (&DMatrix<T>, &DMatrix<T>),
    ) -> Result<DMatrix<T>> {
        let y = input.0 * s * input.1.adjoint();
        Ok(output.0.adjoint() * self.eval_full(t, &y)? * output.1)
    }
}

/// Scalar time modulation `a(t)` of one factor term.
#[derive(Clone)]
pub struct Coefficient<T: Scalar> {
    pub id: String,
    f: Arc<dyn Fn(f64) -> T + Send + Sync>,
}

impl<T: Scalar> Coefficient<T> {
    pub fn new(id: impl Into<String>, f: impl Fn(f64) -> T + Send + Sync + 'static) -> Self {
        Self { id: id.into(), f: Arc::new(f) }
    }

    pub fn at(&self, t: f64) -> T {
        (self.f)(t)
    }

    /// Parses a coefficient identifier: `cos:w`, `sin:w`, `exp:a` or
    /// `linear:a,b` (meaning `a + b t`).
    pub fn parse(id: &str) -> Result<Self> {
        let bad = || DlraError::InvalidInput(format!("unknown coefficient `{id}`"));
        let (kind, args) = id.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let owned = id.to_string();
        match (kind, nums.as_slice()) {
            ("cos", &[w]) => Ok(Self::new(owned, move |t| T::from_real((w * t).cos()))),
            ("sin", &[w]) => Ok(Self::new(owned, move |t| T::from_real((w * t).sin()))),
            ("exp", &[a]) => Ok(Self::new(owned, move |t| T::from_real((a * t).exp()))),
            ("linear", &[a, b]) => Ok(Self::new(owned, move |t| T::from_real(a + b * t))),
            _ => Err(bad()),
        }
    }
}

impl<T: Scalar> fmt::Debug for Coefficient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coefficient({})", self.id)
    }
}

/// One product term `a(t) C Y D`.
#[derive(Debug, Clone)]
pub struct FactorTerm<T: Scalar> {
    pub left: CsrMatrix<T>,
    pub right: CsrMatrix<T>,
    right_adj: CsrMatrix<T>,
    pub coefficient: Option<Coefficient<T>>,
}

impl<T: Scalar> FactorTerm<T> {
    pub fn new(left: CsrMatrix<T>, right: CsrMatrix<T>) -> Self {
        let right_adj = right.adjoint();
        Self { left, right, right_adj, coefficient: None }
    }

    pub fn with_coefficient(mut self, c: Coefficient<T>) -> Self {
        self.coefficient = Some(c);
        self
    }

    fn alpha(&self, t: f64) -> T {
        self.coefficient.as_ref().map_or(T::one(), |c| c.at(t))
    }
}

/// Projected factors `U^H C_l U`, `V^H D_l V` and projected sources for one
/// basis pair, valid only for the bases whose fingerprints they carry.
#[derive(Debug, Clone)]
pub struct ProjectedFactors<T: Scalar> {
    u_fingerprint: u64,
    v_fingerprint: u64,
    c_tilde: Vec<DMatrix<T>>,
    d_tilde: Vec<DMatrix<T>>,
    /// `a_j^H U` per source term.
    src_left: Vec<DMatrix<T>>,
    /// `b_j^H V` per source term.
    src_right: Vec<DMatrix<T>>,
}

/// Cache handed out by [`SumFactorRhs::prepare`].
#[derive(Debug, Clone)]
pub enum Projection<T: Scalar> {
    Cached(Box<ProjectedFactors<T>>),
    /// Time-dependent factors: projections are recomputed on every call.
    Uncached,
}

pub fn basis_fingerprint<T: Scalar>(m: &DMatrix<T>) -> u64 {
    let mut h = DefaultHasher::new();
    m.shape().hash(&mut h);
    for x in m.iter() {
        let (re, im) = x.parts();
        re.to_bits().hash(&mut h);
        im.to_bits().hash(&mut h);
    }
    h.finish()
}

/// `a^H b` as a `1 x k` matrix.
fn row_projection<T: Scalar>(a: &DVector<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let r = a.adjoint() * b;
    DMatrix::from_iterator(1, r.len(), r.iter().copied())
}

fn gemm_macs<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> u64 {
    (a.nrows() * a.ncols() * b.ncols()) as u64
}

/// Structured right-hand side `F(t, Y) = sum_l a_l(t) C_l Y D_l + sum_j a_j b_j^H`.
#[derive(Debug, Clone)]
pub struct SumFactorRhs<T: Scalar> {
    m: usize,
    n: usize,
    terms: Vec<FactorTerm<T>>,
    sources: Vec<(DVector<T>, DVector<T>)>,
    macs: Option<Arc<AtomicU64>>,
}

impl<T: Scalar> SumFactorRhs<T> {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n, terms: Vec::new(), sources: Vec::new(), macs: None }
    }

    /// The zero right-hand side.
    pub fn zero(m: usize, n: usize) -> Self {
        Self::new(m, n)
    }

    pub fn add_term(&mut self, term: FactorTerm<T>) -> Result<()> {
        if term.left.shape() != (self.m, self.m) || term.right.shape() != (self.n, self.n) {
            return Err(DlraError::ShapeMismatch {
                op: "SumFactorRhs::add_term",
                expected: format!("C {0}x{0}, D {1}x{1}", self.m, self.n),
                got: format!(
                    "C {}x{}, D {}x{}",
                    term.left.nrows(),
                    term.left.ncols(),
                    term.right.nrows(),
                    term.right.ncols()
                ),
            });
        }
        self.terms.push(term);
        Ok(())
    }

    pub fn with_term(mut self, left: CsrMatrix<T>, right: CsrMatrix<T>) -> Result<Self> {
        self.add_term(FactorTerm::new(left, right))?;
        Ok(self)
    }

    /// Adds the constant rank-one source `a b^H`.
    pub fn add_source(&mut self, a: DVector<T>, b: DVector<T>) -> Result<()> {
        if a.len() != self.m || b.len() != self.n {
            return Err(DlraError::ShapeMismatch {
                op: "SumFactorRhs::add_source",
                expected: format!("vectors of length {} and {}", self.m, self.n),
                got: format!("{} and {}", a.len(), b.len()),
            });
        }
        self.sources.push((a, b));
        Ok(())
    }

    pub fn terms(&self) -> &[FactorTerm<T>] {
        &self.terms
    }

    pub fn sources(&self) -> &[(DVector<T>, DVector<T>)] {
        &self.sources
    }

    pub fn is_time_dependent(&self) -> bool {
        self.terms.iter().any(|t| t.coefficient.is_some())
    }

    /// Turns on multiply-accumulate counting of the structured path.
    pub fn instrumented(mut self) -> Self {
        self.macs = Some(Arc::new(AtomicU64::new(0)));
        self
    }

    pub fn mac_count(&self) -> u64 {
        self.macs.as_ref().map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn reset_mac_count(&self) {
        if let Some(c) = &self.macs {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn count(&self, n: u64) {
        if let Some(c) = &self.macs {
            c.fetch_add(n, Ordering::Relaxed);
        }
    }

    /// Per-term entries per row `(c_l, d_l)`, rounded up.
    pub fn sparsity_counts(&self) -> (Vec<u64>, Vec<u64>) {
        let c = self.terms.iter().map(|t| t.left.entries_per_row().ceil() as u64).collect();
        let d = self.terms.iter().map(|t| t.right.entries_per_row().ceil() as u64).collect();
        (c, d)
    }

    /// Dense `F(t, Y)` assembled from dense copies of every factor; used as
    /// an independent check of the structured path.
    pub fn eval_dense_reference(&self, t: f64, y: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::<T>::zeros(self.m, self.n);
        for term in &self.terms {
            out += (term.left.to_dense() * y * term.right.to_dense()) * term.alpha(t);
        }
        for (a, b) in &self.sources {
            out += a * b.adjoint();
        }
        out
    }

    fn project_left(&self, c: &CsrMatrix<T>, u: &DMatrix<T>) -> Result<DMatrix<T>> {
        let cu = c.mul_dense(u)?;
        self.count(c.mac_count(u.ncols()) + gemm_macs(&u.adjoint(), &cu));
        Ok(u.adjoint() * cu)
    }

    fn c_tilde(&self, idx: usize, u: &DMatrix<T>, cache: &Projection<T>) -> Result<DMatrix<T>> {
        match cache {
            Projection::Cached(p) => Ok(p.c_tilde[idx].clone()),
            Projection::Uncached => self.project_left(&self.terms[idx].left, u),
        }
    }

    fn d_tilde(&self, idx: usize, v: &DMatrix<T>, cache: &Projection<T>) -> Result<DMatrix<T>> {
        match cache {
            Projection::Cached(p) => Ok(p.d_tilde[idx].clone()),
            Projection::Uncached => self.project_left(&self.terms[idx].right, v),
        }
    }

    fn check_u(&self, u: &DMatrix<T>, cache: &Projection<T>) -> Result<()> {
        if u.nrows() != self.m {
            return Err(shape_err("SumFactorRhs", format!("U with {} rows", self.m), u.shape()));
        }
        if let Projection::Cached(p) = cache {
            if p.u_fingerprint != basis_fingerprint(u) || p.c_tilde.first().is_some_and(|c| c.nrows() != u.ncols()) {
                return Err(DlraError::StaleCache("range basis"));
            }
        }
        Ok(())
    }

    fn check_v(&self, v: &DMatrix<T>, cache: &Projection<T>) -> Result<()> {
        if v.nrows() != self.n {
            return Err(shape_err("SumFactorRhs", format!("V with {} rows", self.n), v.shape()));
        }
        if let Projection::Cached(p) = cache {
            if p.v_fingerprint != basis_fingerprint(v) || p.d_tilde.first().is_some_and(|d| d.nrows() != v.ncols()) {
                return Err(DlraError::StaleCache("co-range basis"));
            }
        }
        Ok(())
    }

    /// Precomputes `U^H C_l U` and `V^H D_l V` once per basis pair.
    ///
    /// Refused when any term carries a time-dependent coefficient.
    pub fn precompute_projected_factors(&self, u: &DMatrix<T>, v: &DMatrix<T>) -> Result<ProjectedFactors<T>> {
        if self.is_time_dependent() {
            return Err(DlraError::CacheRefused("time-dependent factor terms".into()));
        }
        if u.nrows() != self.m || v.nrows() != self.n {
            return Err(DlraError::ShapeMismatch {
                op: "precompute_projected_factors",
                expected: format!("U with {} rows, V with {} rows", self.m, self.n),
                got: format!("{} and {}", u.nrows(), v.nrows()),
            });
        }
        let mut c_tilde = Vec::with_capacity(self.terms.len());
        let mut d_tilde = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            c_tilde.push(self.project_left(&term.left, u)?);
            d_tilde.push(self.project_left(&term.right, v)?);
        }
        let src_left = self.sources.iter().map(|(a, _)| row_projection(a, u)).collect();
        let src_right = self.sources.iter().map(|(_, b)| row_projection(b, v)).collect();
        Ok(ProjectedFactors {
            u_fingerprint: basis_fingerprint(u),
            v_fingerprint: basis_fingerprint(v),
            c_tilde,
            d_tilde,
            src_left,
            src_right,
        })
    }

    fn src_right(&self, j: usize, v: &DMatrix<T>, cache: &Projection<T>) -> DMatrix<T> {
        match cache {
            Projection::Cached(p) => p.src_right[j].clone(),
            Projection::Uncached => row_projection(&self.sources[j].1, v),
        }
    }

    fn src_left(&self, j: usize, u: &DMatrix<T>, cache: &Projection<T>) -> DMatrix<T> {
        match cache {
            Projection::Cached(p) => p.src_left[j].clone(),
            Projection::Uncached => row_projection(&self.sources[j].0, u),
        }
    }

    /// Uncached `F(t, K V^H) V`.
    pub fn eval_k_uncached(&self, t: f64, k: &DMatrix<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.eval_k(t, k, v, &Projection::Uncached)
    }

    /// Uncached `F(t, U L^H)^H U`.
    pub fn eval_l_uncached(&self, t: f64, l: &DMatrix<T>, u: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.eval_l(t, l, u, &Projection::Uncached)
    }

    /// Uncached `U^H F(t, U S V^H) V`.
    pub fn eval_s_uncached(&self, t: f64, s: &DMatrix<T>, u: &DMatrix<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.eval_s(t, s, u, v, &Projection::Uncached)
    }

    /// Reads a problem definition file. Keys (one `key = value` per line,
    /// `#` comments):
    ///
    /// ```text
    /// m = 100
    /// n = 100
    /// term = left.coo right.coo [coefficient-id]
    /// source = a.coo b.coo
    /// ```
    ///
    /// Factor paths are relative to the definition file; source files hold
    /// `m x 1` / `n x 1` coordinate matrices.
    pub fn read_definition(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse_definition(&text, base)
    }

    pub fn parse_definition(text: &str, base: &Path) -> Result<Self> {
        let mut m = None;
        let mut n = None;
        let mut pending_terms = Vec::new();
        let mut pending_sources = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| DlraError::Parse { line: lineno + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer `{s}`")));
            match key {
                "m" => m = Some(int(value)?),
                "n" => n = Some(int(value)?),
                "term" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if !(2..=3).contains(&parts.len()) {
                        return Err(err("term needs `left right [coefficient]`".into()));
                    }
                    pending_terms.push((lineno + 1, parts[0].to_string(), parts[1].to_string(), parts.get(2).map(|s| s.to_string())));
                }
                "source" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(err("source needs `left right`".into()));
                    }
                    pending_sources.push((parts[0].to_string(), parts[1].to_string()));
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let m = m.ok_or(DlraError::Parse { line: 0, msg: "missing `m`".into() })?;
        let n = n.ok_or(DlraError::Parse { line: 0, msg: "missing `n`".into() })?;
        let mut rhs = Self::new(m, n);
        for (line, l, r, coef) in pending_terms {
            let left = CsrMatrix::read_triplet_file(&base.join(l))?;
            let right = CsrMatrix::read_triplet_file(&base.join(r))?;
            let mut term = FactorTerm::new(left, right);
            if let Some(id) = coef {
                term = term.with_coefficient(Coefficient::parse(&id).map_err(|e| DlraError::Parse { line, msg: e.to_string() })?);
            }
            rhs.add_term(term)?;
        }
        for (a, b) in pending_sources {
            let a = CsrMatrix::<T>::read_triplet_file(&base.join(a))?.to_dense();
            let b = CsrMatrix::<T>::read_triplet_file(&base.join(b))?.to_dense();
            if a.ncols() != 1 || b.ncols() != 1 {
                return Err(DlraError::InvalidInput("source factors must be single columns".into()));
            }
            rhs.add_source(a.column(0).into_owned(), b.column(0).into_owned())?;
        }
        Ok(rhs)
    }
}

impl<T: Scalar> MatrixOde<T> for SumFactorRhs<T> {
    type Cache = Projection<T>;

    fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    fn eval_full(&self, t: f64, y: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_shape("SumFactorRhs::eval_full", y, self.m, self.n)?;
        let mut out = DMatrix::<T>::zeros(self.m, self.n);
        for term in &self.terms {
            let yd = term.right.right_mul_dense(y)?;
            let cyd = term.left.mul_dense(&yd)?;
            self.count(term.right.mac_count(self.m) + term.left.mac_count(self.n));
            add_scaled(&mut out, term.alpha(t), &cyd);
        }
        for (a, b) in &self.sources {
            out += a * b.adjoint();
        }
        Ok(out)
    }

    fn prepare(&self, u: &DMatrix<T>, v: &DMatrix<T>) -> Result<Projection<T>> {
        match self.precompute_projected_factors(u, v) {
            Ok(p) => Ok(Projection::Cached(Box::new(p))),
            Err(DlraError::CacheRefused(_)) => Ok(Projection::Uncached),
            Err(e) => Err(e),
        }
    }

    fn eval_k(&self, t: f64, k: &DMatrix<T>, v: &DMatrix<T>, cache: &Projection<T>) -> Result<DMatrix<T>> {
        self.check_v(v, cache)?;
        check_shape("SumFactorRhs::eval_k", k, self.m, v.ncols())?;
        let mut out = DMatrix::<T>::zeros(self.m, v.ncols());
        for (idx, term) in self.terms.iter().enumerate() {
            let d = self.d_tilde(idx, v, cache)?;
            let kd = k * &d;
            let ckd = term.left.mul_dense(&kd)?;
            self.count(gemm_macs(k, &d) + term.left.mac_count(kd.ncols()));
            add_scaled(&mut out, term.alpha(t), &ckd);
        }
        for (j, (a, _)) in self.sources.iter().enumerate() {
            out += a * self.src_right(j, v, cache);
        }
        Ok(out)
    }

    fn eval_l(&self, t: f64, l: &DMatrix<T>, u: &DMatrix<T>, cache: &Projection<T>) -> Result<DMatrix<T>> {
        self.check_u(u, cache)?;
        check_shape("SumFactorRhs::eval_l", l, self.n, u.ncols())?;
        let mut out = DMatrix::<T>::zeros(self.n, u.ncols());
        for (idx, term) in self.terms.iter().enumerate() {
            let c_adj = self.c_tilde(idx, u, cache)?.adjoint();
            let lc = l * &c_adj;
            let dlc = term.right_adj.mul_dense(&lc)?;
            self.count(gemm_macs(l, &c_adj) + term.right_adj.mac_count(lc.ncols()));
            add_scaled(&mut out, term.alpha(t).conjugate(), &dlc);
        }
        for (j, (_, b)) in self.sources.iter().enumerate() {
            out += b * self.src_left(j, u, cache);
        }
        Ok(out)
    }

    fn eval_s(&self, t: f64, s: &DMatrix<T>, u: &DMatrix<T>, v: &DMatrix<T>, cache: &Projection<T>) -> Result<DMatrix<T>> {
        self.check_u(u, cache)?;
        self.check_v(v, cache)?;
        check_shape("SumFactorRhs::eval_s", s, u.ncols(), v.ncols())?;
        let mut out = DMatrix::<T>::zeros(u.ncols(), v.ncols());
        for (idx, _) in self.terms.iter().enumerate() {
            let c = self.c_tilde(idx, u, cache)?;
            let d = self.d_tilde(idx, v, cache)?;
            let cs = &c * s;
            self.count(gemm_macs(&c, s) + gemm_macs(&cs, &d));
            add_scaled(&mut out, self.terms[idx].alpha(t), &(cs * d));
        }
        for j in 0..self.sources.len() {
            out += self.src_left(j, u, cache).adjoint() * self.src_right(j, v, cache);
        }
        Ok(out)
    }

    fn eval_galerkin(
        &self,
        t: f64,
        s: &DMatrix<T>,
        input: (&DMatrix<T>, &DMatrix<T>),
        output: (&DMatrix<T>, &DMatrix<T>),
    ) -> Result<DMatrix<T>> {
        let (u_in, v_in) = input;
        let (u_out, v_out) = output;
        for (b, rows) in [(u_in, self.m), (v_in, self.n), (u_out, self.m), (v_out, self.n)] {
            if b.nrows() != rows {
                return Err(shape_err("SumFactorRhs::eval_galerkin", format!("{rows} rows"), b.shape()));
            }
        }
        check_shape("SumFactorRhs::eval_galerkin", s, u_in.ncols(), v_in.ncols())?;
        let mut out = DMatrix::<T>::zeros(u_out.ncols(), v_out.ncols());
        for term in &self.terms {
            let c = u_out.adjoint() * term.left.mul_dense(u_in)?;
            let d = v_in.adjoint() * term.right.mul_dense(v_out)?;
            add_scaled(&mut out, term.alpha(t), &(c * s * d));
        }
        for (a, b) in &self.sources {
            out += (u_out.adjoint() * a) * (b.adjoint() * v_out);
        }
        Ok(out)
    }
}

/// Operation counts of one step of a second-order parallel integrator for a
/// structured right-hand side, in multiply-accumulate units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    /// `F(t0, Y0) V0`.
    pub c_aug_k: u128,
    /// `F(t0, Y0)^H U0`.
    pub c_aug_l: u128,
    pub c_ode_k: u128,
    pub c_ode_l: u128,
    pub c_ode_s: u128,
    /// Right-hand-side evaluations per substep solve.
    pub n_ode: u64,
}

/// Closed-form operation counts for `M = c.len()` terms with `c[l]` entries
/// per row in `C_l` and `d[l]` in `D_l`.
pub fn cost_estimate(m: u64, n: u64, r: u64, c: &[u64], d: &[u64], n_ode: u64) -> Result<CostReport> {
    if m == 0 || n == 0 || r == 0 {
        return Err(DlraError::InvalidInput("dimensions must be positive".into()));
    }
    if c.len() != d.len() {
        return Err(DlraError::InvalidInput("c and d must list one count per term".into()));
    }
    let (m, n, r, n_ode_w) = (m as u128, n as u128, r as u128, n_ode as u128);
    let mut rep = CostReport { c_aug_k: 0, c_aug_l: 0, c_ode_k: 0, c_ode_l: 0, c_ode_s: 0, n_ode };
    for (&cl, &dl) in c.iter().zip(d) {
        let (cl, dl) = (cl as u128, dl as u128);
        rep.c_aug_k += r * (r * n * dl + r * m + m * cl);
        rep.c_aug_l += r * (r * m * cl + r * n + n * dl);
        rep.c_ode_k += r * (4 * r * n * dl + 4 * r * m + 2 * m * cl);
        rep.c_ode_l += r * (4 * r * m * cl + 4 * r * n + 2 * n * dl);
        rep.c_ode_s += r * (4 * r * n * dl + 4 * r * m * cl + 16 * r * r);
    }
    rep.c_ode_k *= n_ode_w;
    rep.c_ode_l *= n_ode_w;
    rep.c_ode_s *= n_ode_w;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{gaussian_matrix, random_orthonormal};
    use nalgebra::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    fn random_sparse<T: Scalar>(n: usize, per_row: usize, rng: &mut ChaCha8Rng) -> CsrMatrix<T> {
        let mut trip = Vec::new();
        for i in 0..n {
            for _ in 0..per_row {
                let j = rng.random_range(0..n);
                let re: f64 = rng.random_range(-1.0..1.0);
                let im: f64 = if T::IS_COMPLEX { rng.random_range(-1.0..1.0) } else { 0.0 };
                trip.push((i, j, T::from_parts(re, im)));
            }
        }
        CsrMatrix::from_triplets(n, n, &trip).unwrap()
    }

    fn random_rhs<T: Scalar>(m: usize, n: usize, terms: usize, seed: u64) -> SumFactorRhs<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rhs = SumFactorRhs::new(m, n);
        for _ in 0..terms {
            let c = random_sparse(m, 3, &mut rng);
            let d = random_sparse(n, 2, &mut rng);
            rhs.add_term(FactorTerm::new(c, d)).unwrap();
        }
        let a = gaussian_matrix::<T>(m, 1, &mut rng, false).column(0).into_owned();
        let b = gaussian_matrix::<T>(n, 1, &mut rng, false).column(0).into_owned();
        rhs.add_source(a, b).unwrap();
        rhs
    }

    fn rel(a: &DMatrix<C>, b: &DMatrix<C>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let rhs = SumFactorRhs::<f64>::zero(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = gaussian_matrix::<f64>(4, 3, &mut rng, false);
        assert_eq!(rhs.eval_full(0.0, &y).unwrap(), DMatrix::zeros(4, 3));
        let u = random_orthonormal::<f64>(4, 2, &mut rng, false).unwrap();
        let v = random_orthonormal::<f64>(3, 2, &mut rng, false).unwrap();
        let cache = rhs.prepare(&u, &v).unwrap();
        assert_eq!(rhs.eval_k(0.0, &DMatrix::zeros(4, 2), &v, &cache).unwrap(), DMatrix::zeros(4, 2));
        assert_eq!(rhs.eval_l(0.0, &DMatrix::zeros(3, 2), &u, &cache).unwrap(), DMatrix::zeros(3, 2));
        assert_eq!(rhs.eval_s(0.0, &DMatrix::zeros(2, 2), &u, &v, &cache).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn identity_term_is_identity_map() {
        let rhs = SumFactorRhs::<f64>::new(5, 4)
            .with_term(CsrMatrix::identity(5), CsrMatrix::identity(4))
            .unwrap();
        let y = gaussian_matrix::<f64>(5, 4, &mut ChaCha8Rng::seed_from_u64(1), false);
        assert_eq!(rhs.eval_full(0.3, &y).unwrap(), y);
    }

    #[test]
    fn structured_matches_dense_assembly() {
        let rhs = random_rhs::<C>(30, 30, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = gaussian_matrix::<C>(30, 30, &mut rng, false);
        assert!(rel(&rhs.eval_full(0.0, &y).unwrap(), &rhs.eval_dense_reference(0.0, &y)) < 1e-12);
    }

    #[test]
    fn projected_forms_match_composition() {
        let rhs = random_rhs::<C>(30, 30, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let u = random_orthonormal::<C>(30, 6, &mut rng, false).unwrap();
            let v = random_orthonormal::<C>(30, 6, &mut rng, false).unwrap();
            let k = gaussian_matrix::<C>(30, 6, &mut rng, false);
            let l = gaussian_matrix::<C>(30, 6, &mut rng, false);
            let s = gaussian_matrix::<C>(6, 6, &mut rng, false);
            let cache = rhs.prepare(&u, &v).unwrap();
            let fk = rhs.eval_full(0.0, &(&k * v.adjoint())).unwrap() * &v;
            assert!(rel(&rhs.eval_k(0.0, &k, &v, &cache).unwrap(), &fk) < 1e-12);
            let fl = rhs.eval_full(0.0, &(&u * l.adjoint())).unwrap().adjoint() * &u;
            assert!(rel(&rhs.eval_l(0.0, &l, &u, &cache).unwrap(), &fl) < 1e-12);
            let fs = u.adjoint() * rhs.eval_full(0.0, &(&u * &s * v.adjoint())).unwrap() * &v;
            assert!(rel(&rhs.eval_s(0.0, &s, &u, &v, &cache).unwrap(), &fs) < 1e-12);
            assert!(rel(&rhs.eval_galerkin(0.0, &s, (&u, &v), (&u, &v)).unwrap(), &fs) < 1e-12);
        }
    }

    #[test]
    fn full_projection_case_agrees() {
        let rhs = random_rhs::<f64>(8, 8, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random_orthonormal::<f64>(8, 8, &mut rng, false).unwrap();
        let k = gaussian_matrix::<f64>(8, 8, &mut rng, false);
        let cache = rhs.prepare(&v, &v).unwrap();
        let direct = rhs.eval_full(0.0, &(&k * v.adjoint())).unwrap() * &v;
        assert!((rhs.eval_k(0.0, &k, &v, &cache).unwrap() - direct).norm() < 1e-12 * k.norm());
    }

    #[test]
    fn cached_equals_uncached() {
        let rhs = random_rhs::<C>(20, 15, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_orthonormal::<C>(20, 4, &mut rng, false).unwrap();
        let v = random_orthonormal::<C>(15, 4, &mut rng, false).unwrap();
        let s = gaussian_matrix::<C>(4, 4, &mut rng, false);
        let cache = rhs.prepare(&u, &v).unwrap();
        assert!(matches!(cache, Projection::Cached(_)));
        let a = rhs.eval_s(0.0, &s, &u, &v, &cache).unwrap();
        let b = rhs.eval_s_uncached(0.0, &s, &u, &v).unwrap();
        assert!((a - b).norm() <= 1e-14 * s.norm());
    }

    #[test]
    fn time_dependent_terms_refuse_caching() {
        let rhs = SumFactorRhs::<f64>::new(4, 4);
        let mut rhs = rhs;
        rhs.add_term(
            FactorTerm::new(CsrMatrix::identity(4), CsrMatrix::identity(4)).with_coefficient(Coefficient::parse("cos:2").unwrap()),
        )
        .unwrap();
        let u = DMatrix::<f64>::identity(4, 2);
        assert!(matches!(rhs.precompute_projected_factors(&u, &u), Err(DlraError::CacheRefused(_))));
        assert!(matches!(rhs.prepare(&u, &u).unwrap(), Projection::Uncached));
        let y = DMatrix::<f64>::identity(4, 4);
        assert!((rhs.eval_full(0.5, &y).unwrap() - y * 1f64.cos()).norm() < 1e-15);
    }

    #[test]
    fn stale_cache_detected() {
        let rhs = random_rhs::<f64>(10, 10, 1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_orthonormal::<f64>(10, 3, &mut rng, false).unwrap();
        let v = random_orthonormal::<f64>(10, 3, &mut rng, false).unwrap();
        let v2 = random_orthonormal::<f64>(10, 3, &mut rng, false).unwrap();
        let cache = rhs.prepare(&u, &v).unwrap();
        let k = gaussian_matrix::<f64>(10, 3, &mut rng, false);
        assert!(matches!(rhs.eval_k(0.0, &k, &v2, &cache), Err(DlraError::StaleCache(_))));
        // a fresh cache for the new basis is a different fingerprint
        let fresh = rhs.prepare(&u, &v2).unwrap();
        assert!(rhs.eval_k(0.0, &k, &v2, &fresh).is_ok());
    }

    #[test]
    fn linearity() {
        let mut rhs = random_rhs::<C>(12, 12, 2, 12);
        rhs.sources.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let y1 = gaussian_matrix::<C>(12, 12, &mut rng, false);
        let y2 = gaussian_matrix::<C>(12, 12, &mut rng, false);
        let (a, b) = (C::new(0.3, -1.2), C::new(2.0, 0.5));
        let lhs = rhs.eval_full(0.0, &(&y1 * a + &y2 * b)).unwrap();
        let r = rhs.eval_full(0.0, &y1).unwrap() * a + rhs.eval_full(0.0, &y2).unwrap() * b;
        assert!(rel(&lhs, &r) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let rhs = random_rhs::<f64>(6, 5, 1, 14);
        assert!(rhs.eval_full(0.0, &DMatrix::zeros(5, 6)).is_err());
        let v = DMatrix::<f64>::identity(5, 2);
        assert!(rhs.eval_k(0.0, &DMatrix::zeros(6, 3), &v, &Projection::Uncached).is_err());
        let mut bad = SumFactorRhs::<f64>::new(3, 3);
        assert!(bad.add_term(FactorTerm::new(CsrMatrix::identity(2), CsrMatrix::identity(3))).is_err());
    }

    #[test]
    fn cost_unit_plug_in() {
        let c = cost_estimate(1, 1, 1, &[1], &[1], 1).unwrap();
        assert_eq!(c.c_aug_k, 3);
        assert_eq!(c.c_aug_l, 3);
        assert_eq!(c.c_ode_k, 10);
        assert_eq!(c.c_ode_l, 10);
        assert_eq!(c.c_ode_s, 24);
        assert!(cost_estimate(0, 1, 1, &[1], &[1], 1).is_err());
    }

    #[test]
    fn cost_cubic_term_scaling() {
        // isolate the 16 r^3 term by zero sparsity counts
        let a = cost_estimate(10, 10, 3, &[0], &[0], 1).unwrap();
        let b = cost_estimate(10, 10, 6, &[0], &[0], 1).unwrap();
        assert_eq!(a.c_ode_s, 16 * 27);
        assert_eq!(b.c_ode_s, 8 * a.c_ode_s);
    }

    #[test]
    fn coefficient_ids() {
        assert!((Coefficient::<f64>::parse("linear:1,2").unwrap().at(3.0) - 7.0).abs() < 1e-15);
        assert!(Coefficient::<f64>::parse("tan:1").is_err());
        assert!(Coefficient::<f64>::parse("cos").is_err());
    }

    #[test]
    fn definition_file() {
        let dir = std::env::temp_dir().join(format!("dlra-def-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let c = CsrMatrix::<f64>::from_triplets(3, 3, &[(0, 0, 2.0), (1, 2, 1.0)]).unwrap();
        std::fs::write(dir.join("c.coo"), c.to_triplet_text()).unwrap();
        std::fs::write(dir.join("d.coo"), CsrMatrix::<f64>::identity(2).to_triplet_text()).unwrap();
        std::fs::write(dir.join("a.coo"), "3 1\n0 0 1.0\n").unwrap();
        std::fs::write(dir.join("b.coo"), "2 1\n1 0 1.0\n").unwrap();
        let def = "# test\nm = 3\nn = 2\nterm = c.coo d.coo exp:0.5\nsource = a.coo b.coo\n";
        std::fs::write(dir.join("p.def"), def).unwrap();
        let rhs = SumFactorRhs::<f64>::read_definition(&dir.join("p.def")).unwrap();
        assert_eq!(rhs.terms().len(), 1);
        assert!(rhs.is_time_dependent());
        let y = DMatrix::<f64>::from_element(3, 2, 1.0);
        let f = rhs.eval_full(0.0, &y).unwrap();
        assert_eq!(f, rhs.eval_dense_reference(0.0, &y));
        assert_eq!(f[(0, 1)], 3.0);
        assert!(SumFactorRhs::<f64>::parse_definition("m = 3\nbogus = 1\n", &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
