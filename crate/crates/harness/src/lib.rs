//! Benchmark runner for the `dlra` integrators.
//!
//! Studies are described by key-value config files ([`config`]) and write
//! deterministic CSV tables plus SVG plots. Wall-clock measurements go to
//! separate `*_timing.csv` files.

#![allow(clippy::result_large_err)]

pub mod cli;
pub mod config;
pub mod error;
pub mod fit;
pub mod lattice;
pub mod output;
pub mod plot;
pub mod reference;
pub mod sweep;
pub mod workload;

pub use config::{DriftMeasure, ExperimentConfig, ProblemSpec, TruncationSpec};
pub use error::{HarnessError, Result};
pub use fit::{fit_above_floor, fit_slope, FloorFit, SlopeFit};
pub use lattice::{run_lattice, LatticeReport, LatticeRun};
pub use plot::{render_plot, PlotKind};
pub use reference::{reference_solution, ReferenceCache};
pub use sweep::{run_convergence, run_norm_drift, SweepPoint, SweepTable};
