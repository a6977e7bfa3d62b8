//! Command-line surface of `dlra-bench`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::ensure_dir;
use crate::plot::{render_plot_to, PlotKind};
use crate::sweep::SweepTable;
use crate::{run_convergence, run_lattice, run_norm_drift};

#[derive(Debug, Parser)]
#[command(name = "dlra-bench", version, about = "Convergence, norm-drift and lattice studies for parallel BUG integrators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Relative error against a dense reference over a step-size sweep.
    Convergence(RunArgs),
    /// Norm drift over a step-size sweep on a norm-preserving problem.
    NormDrift(RunArgs),
    /// Fixed-rank lattice runs with scalar-flux output.
    Lattice(RunArgs),
    /// Render a CSV table written by another subcommand as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs every substep serially.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Repeat the study for this many consecutive seeds, one subdirectory each.
    #[arg(long, default_value_t = 1)]
    pub seed_sweep: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `loglog` for error tables, `heatmap` for flux fields.
    #[arg(long, default_value = "loglog")]
    pub kind: String,
    /// Defaults to the input path with an `.svg` extension.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

impl RunArgs {
    /// Config with command-line overrides, one per seed of the sweep.
    pub fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let mut base = ExperimentConfig::from_file(&self.config)?;
        if let Some(out) = &self.out {
            base.out = out.clone();
        }
        if let Some(seed) = self.seed {
            base.seed = seed;
        }
        if let Some(t) = self.threads {
            base.threads = t;
        }
        base.validate()?;
        if self.seed_sweep == 0 {
            return Err(HarnessError::config("--seed-sweep must be >= 1"));
        }
        if self.seed_sweep == 1 {
            return Ok(vec![base]);
        }
        Ok((0..self.seed_sweep)
            .map(|k| {
                let mut cfg = base.clone();
                cfg.seed = base.seed + k;
                cfg.out = base.out.join(format!("seed-{}", cfg.seed));
                if base.cache.is_none() {
                    cfg.cache = Some(base.cache_dir());
                }
                cfg
            })
            .collect())
    }
}

fn sweep_summary(table: &SweepTable, label: &str) -> Vec<String> {
    table
        .fits
        .iter()
        .map(|sf| {
            let slope = sf.fit.fit.map_or("n/a".to_string(), |f| format!("{:.3}", f.slope));
            let floor = sf.fit.floor.map_or(String::new(), |f| format!(" (floor {f:.2e}, {} points used)", sf.fit.used.len()));
            format!("{label} {} r={}: slope {slope}{floor}", sf.variant, sf.rank)
        })
        .collect()
}

fn write_sweep(table: &SweepTable, dir: &Path, stem: &str) -> Result<()> {
    ensure_dir(dir)?;
    table.write(dir, stem)?;
    render_plot_to(&dir.join(format!("{stem}.csv")), PlotKind::LogLog, &dir.join(format!("{stem}.svg")))
}

/// Runs a parsed command and returns human-readable summary lines.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    match &cli.command {
        Command::Convergence(args) => {
            for cfg in args.configs()? {
                let table = run_convergence(&cfg)?;
                write_sweep(&table, &cfg.out, "convergence")?;
                lines.extend(sweep_summary(&table, "convergence"));
                lines.push(format!("wrote {}", cfg.out.join("convergence.csv").display()));
            }
        }
        Command::NormDrift(args) => {
            for cfg in args.configs()? {
                let table = run_norm_drift(&cfg)?;
                write_sweep(&table, &cfg.out, "norm_drift")?;
                lines.extend(sweep_summary(&table, "norm drift"));
                lines.push(format!("wrote {}", cfg.out.join("norm_drift.csv").display()));
            }
        }
        Command::Lattice(args) => {
            for cfg in args.configs()? {
                let report = run_lattice(&cfg)?;
                ensure_dir(&cfg.out)?;
                report.write(&cfg.out)?;
                for run in &report.runs {
                    let ((ix, iy), max) = run.max_cell();
                    lines.push(format!(
                        "lattice {} r={}: {} steps, {} stage(s) per step, max flux {max:.4e} at cell ({ix}, {iy}), {:.2} s",
                        run.variant,
                        run.rank,
                        run.stage_counts.len(),
                        run.stage_counts.first().copied().unwrap_or(0),
                        run.wall_time
                    ));
                }
                lines.push(format!("wrote {}", cfg.out.join("lattice_summary.csv").display()));
            }
        }
        Command::Plot(args) => {
            let kind: PlotKind = args.kind.parse()?;
            let output = args.output.clone().unwrap_or_else(|| args.input.with_extension("svg"));
            render_plot_to(&args.input, kind, &output)?;
            lines.push(format!("wrote {}", output.display()));
        }
    }
    Ok(lines)
}
