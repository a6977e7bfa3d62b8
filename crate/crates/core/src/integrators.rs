//! Basis-update & Galerkin macro steps and the multi-step driver.
//!
//! Every variant advances `Y0 = U0 S0 V0^H` over `[t0, t0 + h]` by solving the
//! K-, L- and S-substep ODEs, assembling an augmented coefficient matrix in an
//! enlarged basis and truncating it according to a [`TruncationPolicy`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use crate::error::{DlraError, Result};
use crate::lowrank::{extend_basis, hcat, orth, truncate, LowRankState, TruncationPolicy};
use crate::rhs::MatrixOde;
use crate::scalar::Scalar;
use crate::solver::{integrate, SolverConfig, SubstepStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntegratorVariant {
    /// First-order parallel BUG.
    Parallel1,
    /// Second order, augmenting with half-step bases (`3r` augmented rank).
    Parallel2V1,
    /// Second order, augmenting with the full spans of `K(t1)` and `L(t1)` (`4r`).
    Parallel2V2,
    /// Augmented BUG with a sequential Galerkin S-step.
    AugmentedBug,
}

impl IntegratorVariant {
    pub const ALL: [IntegratorVariant; 4] = [Self::Parallel1, Self::Parallel2V1, Self::Parallel2V2, Self::AugmentedBug];

    pub fn name(self) -> &'static str {
        match self {
            Self::Parallel1 => "parallel1",
            Self::Parallel2V1 => "parallel2_v1",
            Self::Parallel2V2 => "parallel2_v2",
            Self::AugmentedBug => "augmented_bug",
        }
    }

    /// Sequential stages of substep solves per macro step.
    pub fn stage_count(self) -> usize {
        match self {
            Self::AugmentedBug => 2,
            _ => 1,
        }
    }

    pub fn is_second_order(self) -> bool {
        matches!(self, Self::Parallel2V1 | Self::Parallel2V2)
    }
}

impl fmt::Display for IntegratorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntegratorVariant {
    type Err = DlraError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| DlraError::InvalidInput(format!("unknown integrator variant `{s}`")))
    }
}

/// Runs the independent substeps of one macro step.
#[derive(Clone)]
pub enum Executor {
    /// On the calling thread, in the given order of (K, L, S).
    Serial { order: [usize; 3] },
    Pool(Arc<rayon::ThreadPool>),
}

impl Default for Executor {
    fn default() -> Self {
        Self::serial()
    }
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Serial { order } => write!(f, "Serial({order:?})"),
            Self::Pool(p) => write!(f, "Pool({} threads)", p.current_num_threads()),
        }
    }
}

impl Executor {
    pub fn serial() -> Self {
        Self::Serial { order: [0, 1, 2] }
    }

    /// `threads <= 1` runs serially.
    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| DlraError::InvalidInput(format!("thread pool: {e}")))?;
        Ok(Self::Pool(Arc::new(pool)))
    }

    pub fn join3<A, B, C, FA, FB, FC>(&self, fa: FA, fb: FB, fc: FC) -> (A, B, C)
    where
        A: Send,
        B: Send,
        C: Send,
        FA: FnOnce() -> A + Send,
        FB: FnOnce() -> B + Send,
        FC: FnOnce() -> C + Send,
    {
        match self {
            Self::Serial { order } => {
                let (mut fa, mut fb, mut fc) = (Some(fa), Some(fb), Some(fc));
                let (mut a, mut b, mut c) = (None, None, None);
                for &i in order {
                    match i {
                        0 => a = fa.take().map(|f| f()),
                        1 => b = fb.take().map(|f| f()),
                        _ => c = fc.take().map(|f| f()),
                    }
                }
                // An order that skips an index still runs every closure.
                let a = a.unwrap_or_else(|| fa.take().expect("each substep runs once")());
                let b = b.unwrap_or_else(|| fb.take().expect("each substep runs once")());
                let c = c.unwrap_or_else(|| fc.take().expect("each substep runs once")());
                (a, b, c)
            }
            Self::Pool(pool) => pool.install(|| {
                let (a, (b, c)) = rayon::join(fa, || rayon::join(fb, fc));
                (a, b, c)
            }),
        }
    }

    pub fn join2<A, B, FA, FB>(&self, fa: FA, fb: FB) -> (A, B)
    where
        A: Send,
        B: Send,
        FA: FnOnce() -> A + Send,
        FB: FnOnce() -> B + Send,
    {
        let (a, b, ()) = self.join3(fa, fb, || ());
        (a, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub solver: SolverConfig,
    pub policy: TruncationPolicy,
    /// Keep the intermediate bases and substep solutions in [`StepResult::detail`].
    pub record_detail: bool,
}

impl StepOptions {
    pub fn new(solver: SolverConfig, policy: TruncationPolicy) -> Self {
        Self { solver, policy, record_detail: false }
    }
}

/// Intermediate quantities of one step.
#[derive(Debug, Clone)]
pub struct StepDetail<T: Scalar> {
    /// `F(t0, Y0) V0`, computed by the second-order variants.
    pub f_v0: Option<DMatrix<T>>,
    /// Augmented starting bases (second-order variants).
    pub u_hat0: Option<DMatrix<T>>,
    pub v_hat0: Option<DMatrix<T>>,
    pub k1: DMatrix<T>,
    pub l1: DMatrix<T>,
    pub s_bar1: DMatrix<T>,
    pub u_hat1: DMatrix<T>,
    pub v_hat1: DMatrix<T>,
    pub s_hat1: DMatrix<T>,
}

#[derive(Debug, Clone)]
pub struct StepResult<T: Scalar> {
    pub state: LowRankState<T>,
    /// Rank of the augmented matrix before truncation.
    pub pre_truncation_rank: usize,
    /// Frobenius norm of the truncated singular tail.
    pub discarded: f64,
    /// `||U_new^H F(t0, Y0) V_new||_F` over the newly added directions.
    pub eta: f64,
    pub stats: SubstepStats,
    pub stage_count: usize,
    /// Wall time of the K-, L- and S-substep solves.
    pub substep_times: [Duration; 3],
    pub detail: Option<StepDetail<T>>,
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed())
}

struct Substeps<T: Scalar> {
    k1: DMatrix<T>,
    l1: DMatrix<T>,
    s1: DMatrix<T>,
    stats: SubstepStats,
    times: [Duration; 3],
}

/// Solves the three independent substeps with shared projection bases.
#[allow(clippy::too_many_arguments)]
#[allow(clippy::type_complexity)]
fn parallel_substeps<T, R>(
    rhs: &R,
    exec: &Executor,
    t0: f64,
    t1: f64,
    (k0, l0, s0): (&DMatrix<T>, &DMatrix<T>, &DMatrix<T>),
    u: &DMatrix<T>,
    v: &DMatrix<T>,
    cache: &R::Cache,
    solver: &SolverConfig,
) -> Result<Substeps<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    let (k, l, s) = exec.join3(
        || timed(|| integrate(|t, k: &DMatrix<T>| rhs.eval_k(t, k, v, cache), k0, t0, t1, solver)),
        || timed(|| integrate(|t, l: &DMatrix<T>| rhs.eval_l(t, l, u, cache), l0, t0, t1, solver)),
        || timed(|| integrate(|t, s: &DMatrix<T>| rhs.eval_s(t, s, u, v, cache), s0, t0, t1, solver)),
    );
    let ((k1, ks), tk) = (k.0?, k.1);
    let ((l1, ls), tl) = (l.0?, l.1);
    let ((s1, ss), ts) = (s.0?, s.1);
    let mut stats = ks;
    stats.merge(&ls);
    stats.merge(&ss);
    Ok(Substeps { k1, l1, s1, stats, times: [tk, tl, ts] })
}

/// `[[S_bar, L^H V_new], [U_new^H K, 0]]`.
fn augmented_block<T: Scalar>(s_bar: &DMatrix<T>, k1: &DMatrix<T>, l1: &DMatrix<T>, u_new: &DMatrix<T>, v_new: &DMatrix<T>) -> DMatrix<T> {
    let (p, q) = s_bar.shape();
    let (pu, qv) = (u_new.ncols(), v_new.ncols());
    let mut s_hat = DMatrix::<T>::zeros(p + pu, q + qv);
    s_hat.view_mut((0, 0), (p, q)).copy_from(s_bar);
    if qv > 0 {
        s_hat.view_mut((0, q), (p, qv)).copy_from(&(l1.adjoint() * v_new));
    }
    if pu > 0 {
        s_hat.view_mut((p, 0), (pu, q)).copy_from(&(u_new.adjoint() * k1));
    }
    s_hat
}

/// Rejection estimate `||U_new^H F(t0, Y0) V_new||_F`.
pub fn rejection_estimate<T, R>(rhs: &R, state: &LowRankState<T>, u_new: &DMatrix<T>, v_new: &DMatrix<T>) -> Result<f64>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    if u_new.ncols() == 0 || v_new.ncols() == 0 {
        return Ok(0.0);
    }
    Ok(rhs.eval_galerkin(state.t, &state.s, (&state.u, &state.v), (u_new, v_new))?.norm())
}

/// One macro step of `variant` from `state` with step size `h`.
pub fn step<T, R>(
    variant: IntegratorVariant,
    state: &LowRankState<T>,
    rhs: &R,
    h: f64,
    opts: &StepOptions,
    exec: &Executor,
) -> Result<StepResult<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(DlraError::InvalidInput(format!("step size {h} must be positive")));
    }
    opts.policy.validate()?;
    if rhs.shape() != (state.nrows(), state.ncols()) {
        return Err(DlraError::ShapeMismatch {
            op: "step",
            expected: format!("{}x{}", rhs.shape().0, rhs.shape().1),
            got: format!("{}x{}", state.nrows(), state.ncols()),
        });
    }
    match variant {
        IntegratorVariant::Parallel1 => step_parallel1(state, rhs, h, opts, exec),
        IntegratorVariant::Parallel2V1 => step_parallel2(state, rhs, h, opts, exec, false),
        IntegratorVariant::Parallel2V2 => step_parallel2(state, rhs, h, opts, exec, true),
        IntegratorVariant::AugmentedBug => step_augmented(state, rhs, h, opts, exec),
    }
}

fn finish<T: Scalar>(
    variant: IntegratorVariant,
    u_hat: DMatrix<T>,
    s_hat: DMatrix<T>,
    v_hat: DMatrix<T>,
    t1: f64,
    opts: &StepOptions,
    eta: f64,
    stats: SubstepStats,
    times: [Duration; 3],
    detail: Option<StepDetail<T>>,
) -> Result<StepResult<T>> {
    let tr = truncate(&u_hat, &s_hat, &v_hat, &opts.policy, t1)?;
    if tr.state.rank() < opts.policy.r_min && tr.full_rank >= opts.policy.r_min {
        return Err(DlraError::Policy(format!("rank {} below r_min {}", tr.state.rank(), opts.policy.r_min)));
    }
    Ok(StepResult {
        state: tr.state,
        pre_truncation_rank: tr.full_rank,
        discarded: tr.discarded,
        eta,
        stats,
        stage_count: variant.stage_count(),
        substep_times: times,
        detail: detail.map(|mut d| {
            d.u_hat1 = u_hat;
            d.v_hat1 = v_hat;
            d.s_hat1 = s_hat;
            d
        }),
    })
}

fn empty<T: Scalar>() -> DMatrix<T> {
    DMatrix::zeros(0, 0)
}

fn step_parallel1<T, R>(state: &LowRankState<T>, rhs: &R, h: f64, opts: &StepOptions, exec: &Executor) -> Result<StepResult<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    let (u0, s0, v0, t0) = (&state.u, &state.s, &state.v, state.t);
    let t1 = t0 + h;
    let cache = rhs.prepare(u0, v0)?;
    let k0 = u0 * s0;
    let l0 = v0 * s0.adjoint();
    let sub = parallel_substeps(rhs, exec, t0, t1, (&k0, &l0, s0), u0, v0, &cache, &opts.solver)?;

    let u_new = extend_basis(u0, &sub.k1)?;
    let v_new = extend_basis(v0, &sub.l1)?;
    let s_hat = augmented_block(&sub.s1, &sub.k1, &sub.l1, &u_new, &v_new);
    let eta = rejection_estimate(rhs, state, &u_new, &v_new)?;
    let u_hat = hcat(u0, &u_new);
    let v_hat = hcat(v0, &v_new);
    let detail = opts.record_detail.then(|| StepDetail {
        f_v0: None,
        u_hat0: None,
        v_hat0: None,
        k1: sub.k1.clone(),
        l1: sub.l1.clone(),
        s_bar1: sub.s1.clone(),
        u_hat1: empty(),
        v_hat1: empty(),
        s_hat1: empty(),
    });
    finish(IntegratorVariant::Parallel1, u_hat, s_hat, v_hat, t1, opts, eta, sub.stats, sub.times, detail)
}

fn step_parallel2<T, R>(
    state: &LowRankState<T>,
    rhs: &R,
    h: f64,
    opts: &StepOptions,
    exec: &Executor,
    full_span: bool,
) -> Result<StepResult<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    let (u0, s0, v0, t0) = (&state.u, &state.s, &state.v, state.t);
    let t1 = t0 + h;
    let y0_v0 = u0 * s0;
    let y0h_u0 = v0 * s0.adjoint();

    // F(t0, Y0) V0 and F(t0, Y0)^H U0 in the old bases.
    let cache0 = rhs.prepare(u0, v0)?;
    let f_v0 = rhs.eval_k(t0, &y0_v0, v0, &cache0)?;
    let fh_u0 = rhs.eval_l(t0, &y0h_u0, u0, &cache0)?;
    drop(cache0);

    let u_hat0 = hcat(u0, &extend_basis(u0, &f_v0)?);
    let v_hat0 = hcat(v0, &extend_basis(v0, &fh_u0)?);
    let cache = rhs.prepare(&u_hat0, &v_hat0)?;

    let v0h_vhat0 = v0.adjoint() * &v_hat0;
    let u0h_uhat0 = u0.adjoint() * &u_hat0;
    let k0 = u0 * s0 * &v0h_vhat0;
    let l0 = v0 * s0.adjoint() * &u0h_uhat0;
    let s_bar0 = u0h_uhat0.adjoint() * s0 * &v0h_vhat0;
    let sub = parallel_substeps(rhs, exec, t0, t1, (&k0, &l0, &s_bar0), &u_hat0, &v_hat0, &cache, &opts.solver)?;
    drop(cache);

    let (u_new, v_new) = if full_span {
        (extend_basis(&u_hat0, &sub.k1)?, extend_basis(&v_hat0, &sub.l1)?)
    } else {
        let half = T::from_real(0.5 * h);
        let v_star = orth(&(&y0h_u0 + &fh_u0 * half))?;
        let u_star = orth(&(&y0_v0 + &f_v0 * half))?;
        let k_dir = &sub.k1 * (v_hat0.adjoint() * &v_star);
        let l_dir = &sub.l1 * (u_hat0.adjoint() * &u_star);
        (extend_basis(&u_hat0, &k_dir)?, extend_basis(&v_hat0, &l_dir)?)
    };
    let s_hat = augmented_block(&sub.s1, &sub.k1, &sub.l1, &u_new, &v_new);
    let eta = rejection_estimate(rhs, state, &u_new, &v_new)?;
    let u_hat1 = hcat(&u_hat0, &u_new);
    let v_hat1 = hcat(&v_hat0, &v_new);
    let variant = if full_span { IntegratorVariant::Parallel2V2 } else { IntegratorVariant::Parallel2V1 };
    let detail = opts.record_detail.then(|| StepDetail {
        f_v0: Some(f_v0.clone()),
        u_hat0: Some(u_hat0.clone()),
        v_hat0: Some(v_hat0.clone()),
        k1: sub.k1.clone(),
        l1: sub.l1.clone(),
        s_bar1: sub.s1.clone(),
        u_hat1: empty(),
        v_hat1: empty(),
        s_hat1: empty(),
    });
    finish(variant, u_hat1, s_hat, v_hat1, t1, opts, eta, sub.stats, sub.times, detail)
}

fn step_augmented<T, R>(state: &LowRankState<T>, rhs: &R, h: f64, opts: &StepOptions, exec: &Executor) -> Result<StepResult<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    let (u0, s0, v0, t0) = (&state.u, &state.s, &state.v, state.t);
    let t1 = t0 + h;
    let solver = &opts.solver;
    let cache0 = rhs.prepare(u0, v0)?;
    let k0 = u0 * s0;
    let l0 = v0 * s0.adjoint();
    let (k, l) = exec.join2(
        || timed(|| integrate(|t, k: &DMatrix<T>| rhs.eval_k(t, k, v0, &cache0), &k0, t0, t1, solver)),
        || timed(|| integrate(|t, l: &DMatrix<T>| rhs.eval_l(t, l, u0, &cache0), &l0, t0, t1, solver)),
    );
    let ((k1, mut stats), tk) = (k.0?, k.1);
    let ((l1, ls), tl) = (l.0?, l.1);
    stats.merge(&ls);
    drop(cache0);

    let u_new = extend_basis(u0, &k1)?;
    let v_new = extend_basis(v0, &l1)?;
    let u_hat = hcat(u0, &u_new);
    let v_hat = hcat(v0, &v_new);
    let s_hat0 = (u_hat.adjoint() * u0) * s0 * (v0.adjoint() * &v_hat);
    let cache = rhs.prepare(&u_hat, &v_hat)?;
    let (s, ts) = timed(|| integrate(|t, s: &DMatrix<T>| rhs.eval_s(t, s, &u_hat, &v_hat, &cache), &s_hat0, t0, t1, solver));
    let (s_hat1, ss) = s?;
    stats.merge(&ss);
    drop(cache);

    let eta = rejection_estimate(rhs, state, &u_new, &v_new)?;
    let detail = opts.record_detail.then(|| StepDetail {
        f_v0: None,
        u_hat0: None,
        v_hat0: None,
        k1: k1.clone(),
        l1: l1.clone(),
        s_bar1: s_hat1.clone(),
        u_hat1: empty(),
        v_hat1: empty(),
        s_hat1: empty(),
    });
    finish(IntegratorVariant::AugmentedBug, u_hat, s_hat1, v_hat, t1, opts, eta, stats, [tk, tl, ts], detail)
}

/// One row of the per-step diagnostics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub step: usize,
    pub time: f64,
    pub rank: usize,
    pub norm: f64,
    pub eta: f64,
    pub discarded: f64,
    pub pre_truncation_rank: usize,
    pub substep_evals: usize,
    /// Number of step halvings triggered by the rejection estimate.
    pub rejections: usize,
    /// Set on a final step shorter than `h`.
    pub partial: bool,
    /// Cumulative wall time in seconds; excluded from equality-based
    /// determinism checks by the harness.
    pub wall_time: f64,
    /// Cumulative wall time of the K-, L- and S-substeps in seconds.
    pub substep_wall: [f64; 3],
}

impl RunRecord {
    fn initial<T: Scalar>(state: &LowRankState<T>) -> Self {
        Self {
            step: 0,
            time: state.t,
            rank: state.rank(),
            norm: state.norm(),
            eta: 0.0,
            discarded: 0.0,
            pre_truncation_rank: state.rank(),
            substep_evals: 0,
            rejections: 0,
            partial: false,
            wall_time: 0.0,
            substep_wall: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Rejection {
    pub tol: f64,
    pub max_halvings: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveConfig {
    pub t_final: f64,
    pub h: f64,
    pub variant: IntegratorVariant,
    pub step: StepOptions,
    /// Off by default.
    pub rejection: Option<Rejection>,
    /// Abort when `||Y_k|| > norm_guard * max(||Y_0||, 1)`.
    pub norm_guard: f64,
}

impl EvolveConfig {
    pub fn new(variant: IntegratorVariant, t_final: f64, h: f64, step: StepOptions) -> Self {
        Self { t_final, h, variant, step, rejection: None, norm_guard: 1e6 }
    }

    /// Step sizes of the macro grid; a shorter final step closes a remainder.
    pub fn step_sizes(&self) -> Result<Vec<(f64, bool)>> {
        if !(self.h > 0.0) || !(self.t_final >= 0.0) {
            return Err(DlraError::InvalidInput(format!("need h > 0 and T >= 0 (h = {}, T = {})", self.h, self.t_final)));
        }
        let ratio = self.t_final / self.h;
        let near = ratio.round();
        let (full, rem) = if (ratio - near).abs() <= 1e-9 * near.max(1.0) {
            (near as usize, 0.0)
        } else {
            let k = ratio.floor() as usize;
            (k, self.t_final - k as f64 * self.h)
        };
        let mut sizes = vec![(self.h, false); full];
        if rem > 0.0 {
            sizes.push((rem, true));
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    pub records: Vec<RunRecord>,
    pub state: LowRankState<T>,
}

/// A failed run with everything computed before the failure.
#[derive(Debug)]
pub struct EvolveFailure<T: Scalar> {
    pub error: DlraError,
    pub partial: Trajectory<T>,
}

impl<T: Scalar> fmt::Display for EvolveFailure<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self.partial.records.last().map_or(0, |r| r.step);
        write!(f, "run aborted after step {last}: {}", self.error)
    }
}

impl<T: Scalar> std::error::Error for EvolveFailure<T> {}

fn step_with_rejection<T, R>(
    cfg: &EvolveConfig,
    state: &LowRankState<T>,
    rhs: &R,
    h: f64,
    exec: &Executor,
    halvings_left: usize,
    rejections: &mut usize,
    results: &mut Vec<StepResult<T>>,
) -> Result<LowRankState<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    let res = step(cfg.variant, state, rhs, h, &cfg.step, exec)?;
    if let Some(rej) = cfg.rejection {
        if res.eta > rej.tol && halvings_left > 0 {
            *rejections += 1;
            let mid = step_with_rejection(cfg, state, rhs, 0.5 * h, exec, halvings_left - 1, rejections, results)?;
            return step_with_rejection(cfg, &mid, rhs, 0.5 * h, exec, halvings_left - 1, rejections, results);
        }
    }
    let next = res.state.clone();
    results.push(res);
    Ok(next)
}

/// Repeated stepping from `state0` to `t_final`, calling `observer` with every
/// accepted step result.
#[allow(clippy::result_large_err)]
pub fn evolve_with<T, R>(
    state0: &LowRankState<T>,
    rhs: &R,
    cfg: &EvolveConfig,
    exec: &Executor,
    mut observer: impl FnMut(usize, &StepResult<T>),
) -> std::result::Result<Trajectory<T>, EvolveFailure<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    let mut traj = Trajectory { records: vec![RunRecord::initial(state0)], state: state0.clone() };
    let fail = |error, traj: Trajectory<T>| EvolveFailure { error, partial: traj };
    let sizes = match cfg.step_sizes() {
        Ok(s) => s,
        Err(e) => return Err(fail(e, traj)),
    };
    let t_start = state0.t;
    let norm0 = state0.norm().max(1.0);
    let start = Instant::now();
    let mut substep_wall = [0.0f64; 3];
    for (k, &(h, partial)) in sizes.iter().enumerate() {
        let mut rejections = 0;
        let mut results = Vec::new();
        let max_halvings = cfg.rejection.map_or(0, |r| r.max_halvings);
        let stepped = step_with_rejection(cfg, &traj.state, rhs, h, exec, max_halvings, &mut rejections, &mut results);
        let mut next = match stepped {
            Ok(s) => s,
            Err(e) => return Err(fail(e, traj)),
        };
        // Pin the time to the grid so rounding does not accumulate.
        next.t = if partial { t_start + cfg.t_final } else { t_start + (k + 1) as f64 * cfg.h };
        let mut evals = 0;
        let (mut eta, mut discarded, mut pre) = (0.0f64, 0.0f64, 0);
        for r in &results {
            evals += r.stats.evals;
            eta = eta.max(r.eta);
            discarded = discarded.max(r.discarded);
            pre = pre.max(r.pre_truncation_rank);
            for (acc, d) in substep_wall.iter_mut().zip(r.substep_times) {
                *acc += d.as_secs_f64();
            }
            observer(k + 1, r);
        }
        let norm = next.norm();
        traj.records.push(RunRecord {
            step: k + 1,
            time: next.t,
            rank: next.rank(),
            norm,
            eta,
            discarded,
            pre_truncation_rank: pre,
            substep_evals: evals,
            rejections,
            partial,
            wall_time: start.elapsed().as_secs_f64(),
            substep_wall,
        });
        traj.state = next;
        if !norm.is_finite() || norm > cfg.norm_guard * norm0 {
            let msg = format!("norm {norm:e} exceeds {:e} x initial at t = {}", cfg.norm_guard, traj.state.t);
            return Err(fail(DlraError::Numerical(msg), traj));
        }
    }
    Ok(traj)
}

#[allow(clippy::result_large_err)]
pub fn evolve<T, R>(
    state0: &LowRankState<T>,
    rhs: &R,
    cfg: &EvolveConfig,
    exec: &Executor,
) -> std::result::Result<Trajectory<T>, EvolveFailure<T>>
where
    T: Scalar,
    R: MatrixOde<T>,
{
    evolve_with(state0, rhs, cfg, exec, |_, _| {})
}
