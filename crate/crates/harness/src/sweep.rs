//! Step-size sweeps: convergence against a dense reference and norm drift.

use std::path::Path;
use std::time::Instant;

use dlra::lowrank::{frobenius_inner, gaussian_matrix};
use dlra::{
    evolve, step, EvolveConfig, Executor, IntegratorVariant, MatrixOde, RunRecord, Scalar, StepOptions,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DriftMeasure, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::fit::{fit_above_floor, local_slopes, FloorFit};
use crate::output::{fmt_f64, fmt_opt, write_csv};
use crate::reference::{reference_solution, ReferenceCache};
use crate::workload::{Workload, Workloads};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub variant: IntegratorVariant,
    pub rank: usize,
    pub h: f64,
    pub steps: usize,
    /// Relative error or norm drift, depending on the study.
    pub value: f64,
    /// Rank of the final state.
    pub final_rank: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFit {
    pub variant: IntegratorVariant,
    pub rank: usize,
    pub fit: FloorFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
    pub fits: Vec<SeriesFit>,
}

pub const TABLE_HEADER: [&str; 5] = ["variant", "rank", "h", "error", "slope_local"];

impl SweepTable {
    /// Groups points by (variant, rank) in order of first appearance and fits each series.
    pub fn from_points(points: Vec<SweepPoint>) -> Result<Self> {
        let mut keys: Vec<(IntegratorVariant, usize)> = Vec::new();
        for p in &points {
            if !keys.contains(&(p.variant, p.rank)) {
                keys.push((p.variant, p.rank));
            }
        }
        let mut fits = Vec::with_capacity(keys.len());
        for (variant, rank) in keys {
            let (h, v): (Vec<f64>, Vec<f64>) =
                points.iter().filter(|p| p.variant == variant && p.rank == rank).map(|p| (p.h, p.value)).unzip();
            fits.push(SeriesFit { variant, rank, fit: fit_above_floor(&h, &v)? });
        }
        Ok(Self { points, fits })
    }

    pub fn series(&self, variant: IntegratorVariant, rank: usize) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| p.variant == variant && p.rank == rank).collect()
    }

    pub fn fit(&self, variant: IntegratorVariant, rank: usize) -> Option<&FloorFit> {
        self.fits.iter().find(|f| f.variant == variant && f.rank == rank).map(|f| &f.fit)
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::with_capacity(self.points.len());
        for sf in &self.fits {
            let series = self.series(sf.variant, sf.rank);
            let h: Vec<f64> = series.iter().map(|p| p.h).collect();
            let v: Vec<f64> = series.iter().map(|p| p.value).collect();
            for (p, s) in series.iter().zip(local_slopes(&h, &v)) {
                rows.push(vec![p.variant.name().to_string(), p.rank.to_string(), fmt_f64(p.h), fmt_f64(p.value), fmt_opt(s)]);
            }
        }
        rows
    }

    /// Writes `<stem>.csv`, `<stem>_fits.csv` and `<stem>_timing.csv` into `dir`.
    /// Only the timing file depends on the machine.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_csv(&dir.join(format!("{stem}.csv")), &TABLE_HEADER, &self.rows())?;
        let fits: Vec<Vec<String>> = self
            .fits
            .iter()
            .map(|sf| {
                let f = &sf.fit;
                vec![
                    sf.variant.name().to_string(),
                    sf.rank.to_string(),
                    fmt_opt(f.fit.map(|x| x.slope)),
                    fmt_opt(f.fit.map(|x| x.intercept)),
                    fmt_opt(f.fit.map(|x| x.residual)),
                    f.used.len().to_string(),
                    fmt_opt(f.floor),
                    f.flagged.to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join(format!("{stem}_fits.csv")),
            &["variant", "rank", "slope", "intercept", "residual", "points", "floor", "floor_flagged"],
            &fits,
        )?;
        let timing: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| vec![p.variant.name().to_string(), p.rank.to_string(), fmt_f64(p.h), p.steps.to_string(), fmt_f64(p.wall_time)])
            .collect();
        write_csv(&dir.join(format!("{stem}_timing.csv")), &["variant", "rank", "h", "steps", "wall_s"], &timing)
    }
}

/// Runs `f(0..n)` on the executor's pool, or in order when serial. Results keep index order.
pub fn run_cells<R: Send>(exec: &Executor, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    match exec {
        Executor::Pool(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Executor::Serial { .. } => (0..n).map(f).collect(),
    }
}

pub(crate) fn diagnostics(records: &[RunRecord]) -> String {
    let tail = &records[records.len().saturating_sub(5)..];
    tail.iter()
        .map(|r| format!("  step {} t={:e} rank={} norm={:e} discarded={:e}", r.step, r.time, r.rank, r.norm, r.discarded))
        .collect::<Vec<_>>()
        .join("\n")
}

struct Cell {
    load: usize,
    variant: IntegratorVariant,
    steps: usize,
}

fn cells<T: Scalar>(loads: &[Workload<T>], cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let counts = cfg.step_counts()?;
    let mut out = Vec::new();
    for load in 0..loads.len() {
        for &variant in &cfg.variants {
            for &steps in &counts {
                out.push(Cell { load, variant, steps });
            }
        }
    }
    Ok(out)
}

fn run_err<T: Scalar>(w: &Workload<T>, variant: IntegratorVariant, h: f64, records: &[RunRecord], e: dlra::DlraError) -> HarnessError {
    HarnessError::Run { variant: variant.name().into(), rank: w.rank, h, diagnostics: diagnostics(records), source: e }
}

fn evolve_cell<T: Scalar>(
    w: &Workload<T>,
    variant: IntegratorVariant,
    steps: usize,
    cfg: &ExperimentConfig,
    exec: &Executor,
) -> Result<dlra::Trajectory<T>> {
    let h = cfg.t_final / steps as f64;
    let opts = StepOptions::new(cfg.solver, cfg.policy(w.rank));
    let ecfg = EvolveConfig::new(variant, cfg.t_final, h, opts);
    evolve(&w.y0, &w.rhs, &ecfg, exec).map_err(|f| run_err(w, variant, h, &f.partial.records, f.error))
}

/// Dense reference at `t_final` for each workload, through the on-disk cache.
pub fn references<T: Scalar>(loads: &[Workload<T>], cfg: &ExperimentConfig) -> Result<Vec<DMatrix<T>>> {
    let cache = ReferenceCache::new(cfg.cache_dir());
    loads
        .iter()
        .map(|w| {
            let key = format!("{} | T={:e} | {}", w.reference_key, cfg.t_final, cfg.reference);
            cache.get_or_compute(&key, || reference_solution(&w.rhs, &w.reference_start, 0.0, cfg.t_final, &cfg.reference))
        })
        .collect()
}

pub fn convergence_sweep<T: Scalar>(loads: &[Workload<T>], cfg: &ExperimentConfig, exec: &Executor) -> Result<SweepTable> {
    let refs = references(loads, cfg)?;
    let cells = cells(loads, cfg)?;
    let results = run_cells(exec, cells.len(), |i| {
        let c = &cells[i];
        let w = &loads[c.load];
        let start = Instant::now();
        let traj = evolve_cell(w, c.variant, c.steps, cfg, exec)?;
        let reference = &refs[c.load];
        let err = (traj.state.dense() - reference).norm() / reference.norm();
        Ok(SweepPoint {
            variant: c.variant,
            rank: w.rank,
            h: cfg.t_final / c.steps as f64,
            steps: c.steps,
            value: err,
            final_rank: traj.state.rank(),
            wall_time: start.elapsed().as_secs_f64(),
        })
    });
    SweepTable::from_points(results.into_iter().collect::<Result<_>>()?)
}

/// Largest `|Re <Z, F(t, Z)>| / (||Z|| ||F(t, Z)||)` over random probes.
pub fn norm_compatibility_defect<T: Scalar, R: MatrixOde<T>>(rhs: &R, t_final: f64, probes: usize, seed: u64) -> Result<f64> {
    let (m, n) = rhs.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let z = gaussian_matrix::<T>(m, n, &mut rng, !T::IS_COMPLEX);
        let t = rng.random::<f64>() * t_final;
        let fz = rhs.eval_full(t, &z)?;
        let scale = z.norm() * fz.norm();
        if scale > 0.0 {
            worst = worst.max(frobenius_inner(&z, &fz).parts().0.abs() / scale);
        }
    }
    Ok(worst)
}

pub const NORM_PROBES: usize = 20;
pub const NORM_COMPATIBILITY_TOL: f64 = 1e-10;

pub fn drift_sweep<T: Scalar>(loads: &[Workload<T>], cfg: &ExperimentConfig, exec: &Executor) -> Result<SweepTable> {
    for w in loads {
        let defect = norm_compatibility_defect(&w.rhs, cfg.t_final, NORM_PROBES, cfg.seed)?;
        if defect > NORM_COMPATIBILITY_TOL {
            return Err(HarnessError::Input(format!(
                "{} does not preserve the Frobenius norm: relative Re<Z, F(Z)> up to {defect:e}",
                cfg.problem
            )));
        }
    }
    let cells = cells(loads, cfg)?;
    let results = run_cells(exec, cells.len(), |i| {
        let c = &cells[i];
        let w = &loads[c.load];
        let h = cfg.t_final / c.steps as f64;
        let start = Instant::now();
        let n0 = w.y0.norm();
        let (drift, final_rank) = match cfg.drift {
            DriftMeasure::Trajectory => {
                let traj = evolve_cell(w, c.variant, c.steps, cfg, exec)?;
                let d = traj.records.iter().map(|r| (r.norm - n0).abs()).fold(0.0, f64::max);
                (d, traj.state.rank())
            }
            DriftMeasure::Step => {
                let opts = StepOptions::new(cfg.solver, cfg.policy(w.rank));
                let res = step(c.variant, &w.y0, &w.rhs, h, &opts, exec).map_err(|e| run_err(w, c.variant, h, &[], e))?;
                ((res.state.norm() - n0).abs(), res.state.rank())
            }
        };
        Ok(SweepPoint {
            variant: c.variant,
            rank: w.rank,
            h,
            steps: c.steps,
            value: drift,
            final_rank,
            wall_time: start.elapsed().as_secs_f64(),
        })
    });
    SweepTable::from_points(results.into_iter().collect::<Result<_>>()?)
}

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<SweepTable> {
    let exec = Executor::with_threads(cfg.threads)?;
    match Workloads::build(cfg)? {
        Workloads::Real(w) => convergence_sweep(&w, cfg, &exec),
        Workloads::Complex(w) => convergence_sweep(&w, cfg, &exec),
    }
}

pub fn run_norm_drift(cfg: &ExperimentConfig) -> Result<SweepTable> {
    let exec = Executor::with_threads(cfg.threads)?;
    match Workloads::build(cfg)? {
        Workloads::Real(w) => drift_sweep(&w, cfg, &exec),
        Workloads::Complex(w) => drift_sweep(&w, cfg, &exec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProblemSpec;
    use dlra::problems::SyntheticKind;
    use dlra::SolverConfig;

    fn synthetic_cfg(kind: SyntheticKind, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ProblemSpec::Synthetic { m: 8, n: 8, kind });
        cfg.ranks = vec![8];
        cfg.h_points = 4;
        cfg.h_min = 1e-2;
        cfg.out = dir.to_path_buf();
        cfg
    }

    #[test]
    fn full_rank_error_is_the_substep_error() {
        // At full rank every variant integrates the dense flow; with rk4 substeps
        // the sweep shows the substep order.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synthetic_cfg(SyntheticKind::TwoSided, dir.path());
        cfg.ranks = vec![6];
        cfg.problem = ProblemSpec::Synthetic { m: 6, n: 6, kind: SyntheticKind::TwoSided };
        cfg.variants = vec![IntegratorVariant::Parallel1];
        cfg.solver = SolverConfig::rk4(1);
        cfg.h_max = 0.5;
        cfg.h_min = 0.05;
        cfg.reference = SolverConfig::embedded45(1e-12, 1e-12);
        let table = run_convergence(&cfg).unwrap();
        let fit = table.fit(IntegratorVariant::Parallel1, 6).unwrap().fit.unwrap();
        assert!((3.6..=4.4).contains(&fit.slope), "{fit:?}");
    }

    #[test]
    fn drift_requires_norm_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synthetic_cfg(SyntheticKind::TwoSided, dir.path());
        assert!(matches!(run_norm_drift(&cfg), Err(HarnessError::Input(_))));
        let cfg = synthetic_cfg(SyntheticKind::Skew, dir.path());
        let table = run_norm_drift(&cfg).unwrap();
        assert_eq!(table.points.len(), 3 * 4);
    }

    #[test]
    fn rows_carry_local_slopes() {
        let pts: Vec<SweepPoint> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h| SweepPoint {
                variant: IntegratorVariant::Parallel1,
                rank: 2,
                h,
                steps: 1,
                value: h * h,
                final_rank: 2,
                wall_time: 0.0,
            })
            .collect();
        let t = SweepTable::from_points(pts).unwrap();
        let rows = t.rows();
        assert_eq!(rows[0][4], "");
        assert!((rows[2][4].parse::<f64>().unwrap() - 2.0).abs() < 1e-12);
        assert!((t.fit(IntegratorVariant::Parallel1, 2).unwrap().fit.unwrap().slope - 2.0).abs() < 1e-12);
    }
}
