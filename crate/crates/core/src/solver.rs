//! Explicit one-step solvers for the substep matrix ODEs.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{DlraError, Result};
use crate::lowrank::{add_scaled, all_finite};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubstepMethod {
    /// Explicit trapezoidal rule with a fixed number of equal steps.
    Heun { substeps: usize },
    /// Classical fourth-order Runge-Kutta with a fixed number of equal steps.
    Rk4 { substeps: usize },
    /// Dormand-Prince 5(4) pair with PI step-size control.
    Embedded45 { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub method: SubstepMethod,
    /// Upper bound on accepted plus rejected steps of one `integrate` call.
    pub max_steps: usize,
}

impl SolverConfig {
    pub const DEFAULT_MAX_STEPS: usize = 100_000;

    pub fn heun(substeps: usize) -> Self {
        Self { method: SubstepMethod::Heun { substeps }, max_steps: Self::DEFAULT_MAX_STEPS }
    }

    pub fn rk4(substeps: usize) -> Self {
        Self { method: SubstepMethod::Rk4 { substeps }, max_steps: Self::DEFAULT_MAX_STEPS }
    }

    pub fn embedded45(rtol: f64, atol: f64) -> Self {
        Self { method: SubstepMethod::Embedded45 { rtol, atol }, max_steps: Self::DEFAULT_MAX_STEPS }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            SubstepMethod::Heun { substeps } | SubstepMethod::Rk4 { substeps } if substeps == 0 => {
                Err(DlraError::InvalidInput("substep count must be >= 1".into()))
            }
            SubstepMethod::Embedded45 { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => {
                Err(DlraError::InvalidInput(format!("tolerances must be positive (rtol {rtol}, atol {atol})")))
            }
            _ if self.max_steps == 0 => Err(DlraError::InvalidInput("max_steps must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Right-hand-side evaluations per step of the method (adaptive: per
    /// accepted step with first-same-as-last reuse).
    pub fn evals_per_step(&self) -> usize {
        match self.method {
            SubstepMethod::Heun { .. } => 2,
            SubstepMethod::Rk4 { .. } => 4,
            SubstepMethod::Embedded45 { .. } => 6,
        }
    }
}

impl fmt::Display for SolverConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            SubstepMethod::Heun { substeps } => write!(f, "heun:{substeps}"),
            SubstepMethod::Rk4 { substeps } => write!(f, "rk4:{substeps}"),
            SubstepMethod::Embedded45 { rtol, atol } => write!(f, "embedded45:{rtol:e},{atol:e}"),
        }
    }
}

impl FromStr for SolverConfig {
    type Err = DlraError;

    /// Parses `heun[:k]`, `rk4[:k]` or `embedded45[:rtol[,atol]]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || DlraError::InvalidInput(format!("unknown solver `{s}`"));
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let cfg = match name {
            "heun" | "rk4" => {
                let k = match args {
                    Some(a) => a.parse::<usize>().map_err(|_| bad())?,
                    None => 1,
                };
                if name == "heun" {
                    Self::heun(k)
                } else {
                    Self::rk4(k)
                }
            }
            "embedded45" => {
                let (rtol, atol) = match args {
                    None => (1e-10, 1e-10),
                    Some(a) => {
                        let v: Vec<f64> = a
                            .split(',')
                            .map(|x| x.trim().parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad())?;
                        match v.as_slice() {
                            [r] => (*r, *r),
                            [r, a] => (*r, *a),
                            _ => return Err(bad()),
                        }
                    }
                };
                Self::embedded45(rtol, atol)
            }
            _ => return Err(bad()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Work done by one or more `integrate` calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubstepStats {
    pub steps: usize,
    pub rejected: usize,
    pub evals: usize,
}

impl SubstepStats {
    pub fn merge(&mut self, other: &SubstepStats) {
        self.steps += other.steps;
        self.rejected += other.rejected;
        self.evals += other.evals;
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Error weights b - b_hat.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const PI_BETA: f64 = 0.04;

/// `y + sum_i w_i k_i`.
fn combine<T: Scalar>(y: &DMatrix<T>, terms: &[(f64, &DMatrix<T>)]) -> DMatrix<T> {
    let mut out = y.clone();
    for &(w, k) in terms {
        if w != 0.0 {
            add_scaled(&mut out, T::from_real(w), k);
        }
    }
    out
}

struct Counter<F> {
    f: F,
    stats: SubstepStats,
}

impl<F> Counter<F> {
    fn call<T: Scalar>(&mut self, t: f64, y: &DMatrix<T>) -> Result<DMatrix<T>>
    where
        F: FnMut(f64, &DMatrix<T>) -> Result<DMatrix<T>>,
    {
        self.stats.evals += 1;
        let dy = (self.f)(t, y)?;
        if dy.shape() != y.shape() {
            return Err(DlraError::ShapeMismatch {
                op: "integrate",
                expected: format!("{}x{}", y.nrows(), y.ncols()),
                got: format!("{}x{}", dy.nrows(), dy.ncols()),
            });
        }
        if !all_finite(&dy) {
            return Err(DlraError::Integration { t, reason: "non-finite right-hand side".into(), stats: self.stats });
        }
        Ok(dy)
    }
}

/// Integrates `dY/dt = f(t, Y)` from `t0` to `t1`.
pub fn integrate<T, F>(f: F, y0: &DMatrix<T>, t0: f64, t1: f64, config: &SolverConfig) -> Result<(DMatrix<T>, SubstepStats)>
where
    T: Scalar,
    F: FnMut(f64, &DMatrix<T>) -> Result<DMatrix<T>>,
{
    config.validate()?;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(DlraError::InvalidInput(format!("integration interval [{t0}, {t1}] is empty")));
    }
    if !all_finite(y0) {
        return Err(DlraError::InvalidInput("non-finite initial value".into()));
    }
    let mut rhs = Counter { f, stats: SubstepStats::default() };
    let y = match config.method {
        SubstepMethod::Heun { substeps } => fixed_steps(&mut rhs, y0, t0, t1, substeps, heun_step)?,
        SubstepMethod::Rk4 { substeps } => fixed_steps(&mut rhs, y0, t0, t1, substeps, rk4_step)?,
        SubstepMethod::Embedded45 { rtol, atol } => dopri(&mut rhs, y0, t0, t1, rtol, atol, config.max_steps)?,
    };
    Ok((y, rhs.stats))
}

type StepFn<T, F> = fn(&mut Counter<F>, f64, &DMatrix<T>, f64) -> Result<DMatrix<T>>;

fn fixed_steps<T, F>(
    rhs: &mut Counter<F>,
    y0: &DMatrix<T>,
    t0: f64,
    t1: f64,
    n: usize,
    step: StepFn<T, F>,
) -> Result<DMatrix<T>>
where
    T: Scalar,
    F: FnMut(f64, &DMatrix<T>) -> Result<DMatrix<T>>,
{
    let h = (t1 - t0) / n as f64;
    let mut y = y0.clone();
    for i in 0..n {
        let t = t0 + i as f64 * h;
        y = step(rhs, t, &y, h)?;
        rhs.stats.steps += 1;
    }
    Ok(y)
}

fn heun_step<T, F>(rhs: &mut Counter<F>, t: f64, y: &DMatrix<T>, h: f64) -> Result<DMatrix<T>>
where
    T: Scalar,
    F: FnMut(f64, &DMatrix<T>) -> Result<DMatrix<T>>,
{
    let k1 = rhs.call(t, y)?;
    let k2 = rhs.call(t + h, &combine(y, &[(h, &k1)]))?;
    Ok(combine(y, &[(0.5 * h, &k1), (0.5 * h, &k2)]))
}

fn rk4_step<T, F>(rhs: &mut Counter<F>, t: f64, y: &DMatrix<T>, h: f64) -> Result<DMatrix<T>>
where
    T: Scalar,
    F: FnMut(f64, &DMatrix<T>) -> Result<DMatrix<T>>,
{
    let k1 = rhs.call(t, y)?;
    let k2 = rhs.call(t + 0.5 * h, &combine(y, &[(0.5 * h, &k1)]))?;
    let k3 = rhs.call(t + 0.5 * h, &combine(y, &[(0.5 * h, &k2)]))?;
    let k4 = rhs.call(t + h, &combine(y, &[(h, &k3)]))?;
    Ok(combine(y, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]))
}

/// Starting step from the derivative scales (Hairer, Norsett & Wanner).
fn initial_step<T, F>(rhs: &mut Counter<F>, t0: f64, y0: &DMatrix<T>, f0: &DMatrix<T>, span: f64, rtol: f64, atol: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(f64, &DMatrix<T>) -> Result<DMatrix<T>>,
{
    let sc = atol + rtol * y0.norm();
    let d0 = y0.norm() / sc;
    let d1 = f0.norm() / sc;
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let f1 = rhs.call(t0 + h0, &combine(y0, &[(h0, f0)]))?;
    let d2 = (&f1 - f0).norm() / sc / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dopri<T, F>(
    rhs: &mut Counter<F>,
    y0: &DMatrix<T>,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<DMatrix<T>>
where
    T: Scalar,
    F: FnMut(f64, &DMatrix<T>) -> Result<DMatrix<T>>,
{
    let span = t1 - t0;
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = rhs.call(t, &y)?;
    let mut h = initial_step(rhs, t0, &y, &k1, span, rtol, atol)?;
    let alpha = 0.2 - 0.75 * PI_BETA;
    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;

    loop {
        if rhs.stats.steps + rhs.stats.rejected >= max_steps {
            return Err(DlraError::Integration { t, reason: format!("step limit {max_steps} exceeded"), stats: rhs.stats });
        }
        let remaining = t1 - t;
        // Land exactly on t1 instead of leaving a sliver of the interval.
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(span) {
            return Err(DlraError::Integration { t, reason: format!("step size underflow (h = {h:e})"), stats: rhs.stats });
        }

        let k2 = rhs.call(t + C2 * h, &combine(&y, &[(A21 * h, &k1)]))?;
        let k3 = rhs.call(t + C3 * h, &combine(&y, &[(A31 * h, &k1), (A32 * h, &k2)]))?;
        let k4 = rhs.call(t + C4 * h, &combine(&y, &[(A41 * h, &k1), (A42 * h, &k2), (A43 * h, &k3)]))?;
        let k5 = rhs.call(
            t + C5 * h,
            &combine(&y, &[(A51 * h, &k1), (A52 * h, &k2), (A53 * h, &k3), (A54 * h, &k4)]),
        )?;
        let k6 = rhs.call(
            t + h,
            &combine(&y, &[(A61 * h, &k1), (A62 * h, &k2), (A63 * h, &k3), (A64 * h, &k4), (A65 * h, &k5)]),
        )?;
        let y_new = combine(&y, &[(B1 * h, &k1), (B3 * h, &k3), (B4 * h, &k4), (B5 * h, &k5), (B6 * h, &k6)]);
        let k7 = rhs.call(t + h, &y_new)?;
        let mut e = DMatrix::<T>::zeros(y.nrows(), y.ncols());
        for (w, k) in [(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)] {
            add_scaled(&mut e, T::from_real(w * h), k);
        }
        let scale = atol + rtol * y.norm().max(y_new.norm());
        let err = e.norm() / scale;
        if !err.is_finite() {
            return Err(DlraError::Integration { t, reason: "non-finite error estimate".into(), stats: rhs.stats });
        }

        if err <= 1.0 {
            rhs.stats.steps += 1;
            t = if last { t1 } else { t + h };
            y = y_new;
            k1 = k7;
            if last {
                return Ok(y);
            }
            let mut factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                SAFETY * err.powf(-alpha) * err_prev.powf(PI_BETA)
            };
            factor = factor.clamp(MIN_FACTOR, MAX_FACTOR);
            if last_rejected {
                factor = factor.min(1.0);
            }
            h *= factor;
            err_prev = err.max(1e-4);
            last_rejected = false;
        } else {
            rhs.stats.rejected += 1;
            // The FSAL stage was evaluated at a rejected point; it is not reused.
            let factor = (SAFETY * err.powf(-alpha)).clamp(MIN_FACTOR, 1.0);
            h *= factor;
            last_rejected = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Complex;

    fn scalar(y: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, y)
    }

    #[test]
    fn zero_rhs_is_identity() {
        let y0 = DMatrix::from_fn(3, 2, |i, j| (i as f64) - 0.7 * j as f64);
        for cfg in [SolverConfig::heun(3), SolverConfig::rk4(2), SolverConfig::embedded45(1e-10, 1e-10)] {
            let (y1, _) = integrate(|_, y: &DMatrix<f64>| Ok(DMatrix::zeros(y.nrows(), y.ncols())), &y0, 0.0, 1.0, &cfg).unwrap();
            assert_eq!(y1, y0);
        }
    }

    #[test]
    fn exponential_closed_form() {
        let cfg = SolverConfig::embedded45(1e-10, 1e-10);
        let (y1, stats) = integrate(|_, y: &DMatrix<f64>| Ok(y.clone()), &scalar(1.0), 0.0, 1.0, &cfg).unwrap();
        assert!((y1[(0, 0)] - std::f64::consts::E).abs() <= 1e-8);
        assert!(stats.steps > 0);
    }

    #[test]
    fn skew_flow_conserves_norm() {
        let a = DMatrix::from_fn(5, 5, |i, j| ((i as f64) - (j as f64)) * 0.3 + if i < j { 0.1 } else if i > j { -0.1 } else { 0.0 });
        assert_eq!(&a + a.transpose(), DMatrix::zeros(5, 5));
        let y0 = DMatrix::from_fn(5, 3, |i, j| (1 + i + 2 * j) as f64 * 0.1);
        let cfg = SolverConfig::embedded45(1e-12, 1e-12);
        let (y1, _) = integrate(|_, y: &DMatrix<f64>| Ok(&a * y), &y0, 0.0, 2.0, &cfg).unwrap();
        assert!((y1.norm() - y0.norm()).abs() <= 1e-8);
    }

    fn global_slope(cfg_for: impl Fn(usize) -> SolverConfig) -> f64 {
        // y' = -2 t y, y(0) = 1, y(1) = e^{-1}
        let exact = (-1.0f64).exp();
        let ns = [4usize, 8, 16, 32, 64];
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| {
                let (y, _) = integrate(|t, y: &DMatrix<f64>| Ok(y * (-2.0 * t)), &scalar(1.0), 0.0, 1.0, &cfg_for(n)).unwrap();
                ((1.0 / n as f64).ln(), (y[(0, 0)] - exact).abs().ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn fixed_step_orders() {
        let heun = global_slope(SolverConfig::heun);
        assert!((1.8..=2.2).contains(&heun), "heun slope {heun}");
        let rk4 = global_slope(SolverConfig::rk4);
        assert!((3.7..=4.3).contains(&rk4), "rk4 slope {rk4}");
    }

    #[test]
    fn complex_rotation() {
        let i = Complex::new(0.0, 1.0);
        let y0 = DMatrix::from_element(1, 1, Complex::new(1.0, 0.0));
        let cfg = SolverConfig::embedded45(1e-11, 1e-11);
        let (y1, _) = integrate(move |_, y: &DMatrix<Complex<f64>>| Ok(y * i), &y0, 0.0, 3.0, &cfg).unwrap();
        let exact = Complex::new(3f64.cos(), 3f64.sin());
        assert!((y1[(0, 0)] - exact).norm() < 1e-9);
    }

    #[test]
    fn failures_are_reported() {
        let mut cfg = SolverConfig::embedded45(1e-12, 1e-12);
        cfg.max_steps = 3;
        let err = integrate(|_, y: &DMatrix<f64>| Ok(y * 50.0), &scalar(1.0), 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, DlraError::Integration { .. }));
        let err = integrate(|_, _y: &DMatrix<f64>| Ok(scalar(f64::NAN)), &scalar(1.0), 0.0, 1.0, &SolverConfig::heun(1)).unwrap_err();
        assert!(matches!(err, DlraError::Integration { .. }));
        assert!(integrate(|_, y: &DMatrix<f64>| Ok(y.clone()), &scalar(1.0), 1.0, 1.0, &SolverConfig::heun(1)).is_err());
        assert!(SolverConfig::heun(0).validate().is_err());
        assert!(SolverConfig::embedded45(0.0, 1.0).validate().is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in ["heun:2", "rk4:1", "embedded45:1e-10,1e-9"] {
            let cfg: SolverConfig = s.parse().unwrap();
            assert_eq!(cfg.to_string().parse::<SolverConfig>().unwrap(), cfg);
        }
        assert_eq!("heun".parse::<SolverConfig>().unwrap(), SolverConfig::heun(1));
        assert!("euler".parse::<SolverConfig>().is_err());
    }
}
