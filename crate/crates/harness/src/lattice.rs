//! Lattice radiative-transfer runs.

use std::path::Path;
use std::time::Instant;

use dlra::problems::{lattice_build_with, lattice_initial, lattice_scalar_flux, LatticeLayout, LatticeProblem};
use dlra::{evolve_with, EvolveConfig, Executor, IntegratorVariant, RunRecord, StepOptions};
use nalgebra::DMatrix;

use crate::config::{ExperimentConfig, ProblemSpec};
use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, write_csv};
use crate::plot::heatmap_svg;
use crate::sweep::{diagnostics, run_cells};

#[derive(Debug, Clone)]
pub struct LatticeRun {
    pub variant: IntegratorVariant,
    pub rank: usize,
    pub h: f64,
    /// `flux[(ix, iy)]` at the final time.
    pub flux: DMatrix<f64>,
    pub records: Vec<RunRecord>,
    /// Sequential stages of each macro step.
    pub stage_counts: Vec<usize>,
    pub wall_time: f64,
}

impl LatticeRun {
    /// Cell index and value of the largest scalar flux.
    pub fn max_cell(&self) -> ((usize, usize), f64) {
        let mut best = ((0, 0), f64::NEG_INFINITY);
        for iy in 0..self.flux.ncols() {
            for ix in 0..self.flux.nrows() {
                if self.flux[(ix, iy)] > best.1 {
                    best = ((ix, iy), self.flux[(ix, iy)]);
                }
            }
        }
        best
    }

    pub fn stem(&self) -> String {
        format!("{}_r{}", self.variant.name(), self.rank)
    }
}

pub struct LatticeReport {
    pub problem: LatticeProblem,
    pub runs: Vec<LatticeRun>,
}

impl LatticeReport {
    pub fn run(&self, variant: IntegratorVariant, rank: usize) -> Option<&LatticeRun> {
        self.runs.iter().find(|r| r.variant == variant && r.rank == rank)
    }

    /// `||Phi_a - Phi_b|| / ||Phi_b||` over the grid.
    pub fn relative_l2(&self, a: &LatticeRun, b: &LatticeRun) -> f64 {
        (&a.flux - &b.flux).norm() / b.flux.norm()
    }

    /// Whether the cell lies in a block with a nonzero source.
    pub fn in_source_block(&self, cell: (usize, usize)) -> bool {
        let (bx, by) = self.problem.block_of(cell.0, cell.1);
        self.problem.layout.blocks[bx][by].q > 0.0
    }

    /// `(x, y, phi)` at cell centers, x fastest.
    pub fn flux_cells(&self, run: &LatticeRun) -> Vec<(f64, f64, f64)> {
        let n = self.problem.n_xy;
        let mut cells = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                let (x, y) = self.problem.cell_center(ix, iy);
                cells.push((x, y, run.flux[(ix, iy)]));
            }
        }
        cells
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut summary = Vec::new();
        let mut timing = Vec::new();
        for run in &self.runs {
            let stem = run.stem();
            let cells = self.flux_cells(run);
            let rows: Vec<Vec<String>> = cells.iter().map(|&(x, y, phi)| vec![fmt_f64(x), fmt_f64(y), fmt_f64(phi)]).collect();
            write_csv(&dir.join(format!("flux_{stem}.csv")), &["x", "y", "phi"], &rows)?;
            let svg = heatmap_svg(&cells, &format!("scalar flux, {} r={}", run.variant, run.rank))?;
            let svg_path = dir.join(format!("flux_{stem}.svg"));
            std::fs::write(&svg_path, svg).map_err(|e| HarnessError::io(&svg_path, e))?;

            let records: Vec<Vec<String>> = run
                .records
                .iter()
                .map(|r| {
                    let stages = r.step.checked_sub(1).and_then(|k| run.stage_counts.get(k)).copied().unwrap_or(0);
                    vec![
                        r.step.to_string(),
                        fmt_f64(r.time),
                        r.rank.to_string(),
                        fmt_f64(r.norm),
                        fmt_f64(r.eta),
                        fmt_f64(r.discarded),
                        r.pre_truncation_rank.to_string(),
                        r.substep_evals.to_string(),
                        stages.to_string(),
                    ]
                })
                .collect();
            write_csv(
                &dir.join(format!("records_{stem}.csv")),
                &["step", "time", "rank", "norm", "eta", "discarded", "pre_truncation_rank", "substep_evals", "stages"],
                &records,
            )?;
            let walls: Vec<Vec<String>> = run
                .records
                .iter()
                .map(|r| {
                    let [k, l, s] = r.substep_wall;
                    vec![r.step.to_string(), fmt_f64(r.wall_time), fmt_f64(k), fmt_f64(l), fmt_f64(s)]
                })
                .collect();
            write_csv(&dir.join(format!("timing_{stem}.csv")), &["step", "wall_s", "k_s", "l_s", "s_s"], &walls)?;

            let ((ix, iy), max) = run.max_cell();
            let (bx, by) = self.problem.block_of(ix, iy);
            let stages = run.stage_counts.first().copied().unwrap_or(0);
            summary.push(vec![
                run.variant.name().to_string(),
                run.rank.to_string(),
                fmt_f64(run.h),
                run.stage_counts.len().to_string(),
                stages.to_string(),
                fmt_f64(max),
                format!("{bx}"),
                format!("{by}"),
                self.in_source_block((ix, iy)).to_string(),
                fmt_f64(run.flux.min()),
            ]);
            timing.push(vec![run.variant.name().to_string(), run.rank.to_string(), fmt_f64(run.wall_time)]);
        }
        write_csv(
            &dir.join("lattice_summary.csv"),
            &["variant", "rank", "h", "steps", "stages_per_step", "max_phi", "max_block_x", "max_block_y", "max_in_source", "min_phi"],
            &summary,
        )?;
        let mut pairs = Vec::new();
        for (i, a) in self.runs.iter().enumerate() {
            for b in &self.runs[i + 1..] {
                if a.rank == b.rank {
                    pairs.push(vec![a.rank.to_string(), a.variant.name().into(), b.variant.name().into(), fmt_f64(self.relative_l2(a, b))]);
                }
            }
        }
        write_csv(&dir.join("lattice_comparison.csv"), &["rank", "variant_a", "variant_b", "relative_l2"], &pairs)?;
        write_csv(&dir.join("lattice_timing.csv"), &["variant", "rank", "wall_s"], &timing)
    }
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<(LatticeProblem, f64)> {
    let ProblemSpec::Lattice { n_xy, order, cfl, layout } = &cfg.problem else {
        return Err(HarnessError::Input(format!("`lattice` needs problem = lattice, got {}", cfg.problem)));
    };
    let mut materials = LatticeLayout::standard();
    if let Some(path) = layout {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        materials.apply_overrides(&text)?;
    }
    let problem = lattice_build_with(*n_xy, *order, materials)?;
    let h = problem.time_step(*cfl);
    Ok((problem, h))
}

pub fn run_lattice(cfg: &ExperimentConfig) -> Result<LatticeReport> {
    let (problem, h) = build_problem(cfg)?;
    let exec = Executor::with_threads(cfg.threads)?;
    let cells: Vec<(IntegratorVariant, usize)> =
        cfg.ranks.iter().flat_map(|&r| cfg.variants.iter().map(move |&v| (v, r))).collect();
    let runs = run_cells(&exec, cells.len(), |i| {
        let (variant, rank) = cells[i];
        let y0 = lattice_initial(&problem, rank, cfg.seed)?;
        let ecfg = EvolveConfig::new(variant, cfg.t_final, h, StepOptions::new(cfg.solver, cfg.policy(rank)));
        let mut stage_counts = Vec::new();
        let start = Instant::now();
        let traj = evolve_with(&y0, &problem.rhs, &ecfg, &exec, |_, res| stage_counts.push(res.stage_count)).map_err(|f| {
            HarnessError::Run {
                variant: variant.name().into(),
                rank,
                h,
                diagnostics: diagnostics(&f.partial.records),
                source: f.error,
            }
        })?;
        let wall_time = start.elapsed().as_secs_f64();
        let flux = lattice_scalar_flux(&traj.state, &problem)?;
        Ok(LatticeRun { variant, rank, h, flux, records: traj.records, stage_counts, wall_time })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LatticeReport { problem, runs })
}
