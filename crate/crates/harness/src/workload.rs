//! Problem instances for the matrix-ODE studies.

use dlra::problems::{schrodinger_build, schrodinger_initial, schrodinger_initial_full, synthetic_exact};
use dlra::{LowRankState, Scalar, SumFactorRhs};
use nalgebra::{Complex, DMatrix};

use crate::config::{ExperimentConfig, ProblemSpec};
use crate::error::{HarnessError, Result};

/// Everything one rank of a sweep needs.
#[derive(Debug, Clone)]
pub struct Workload<T: Scalar> {
    pub rank: usize,
    pub rhs: SumFactorRhs<T>,
    pub y0: LowRankState<T>,
    /// Initial value of the dense reference run.
    pub reference_start: DMatrix<T>,
    /// Identifies `reference_start` and `rhs` for the reference cache.
    pub reference_key: String,
}

pub enum Workloads {
    Real(Vec<Workload<f64>>),
    Complex(Vec<Workload<Complex<f64>>>),
}

impl Workloads {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.problem {
            ProblemSpec::Schrodinger { n } => {
                let problem = schrodinger_build(*n)?;
                // The reference starts from the untruncated initial value.
                let full = schrodinger_initial_full(*n, cfg.seed)?.dense();
                let key = format!("{} seed={} full", cfg.problem, cfg.seed);
                let loads = cfg
                    .ranks
                    .iter()
                    .map(|&r| {
                        let (y0, _) = schrodinger_initial(*n, r, cfg.seed)?;
                        Ok(Workload {
                            rank: r,
                            rhs: problem.rhs.clone(),
                            y0,
                            reference_start: full.clone(),
                            reference_key: key.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(Workloads::Complex(loads))
            }
            ProblemSpec::Synthetic { m, n, kind } => {
                let loads = cfg
                    .ranks
                    .iter()
                    .map(|&r| {
                        let p = synthetic_exact(*m, *n, r, *kind, cfg.seed)?;
                        Ok(Workload {
                            rank: r,
                            reference_start: p.y0.dense(),
                            reference_key: format!("{} seed={} rank={r}", cfg.problem, cfg.seed),
                            rhs: p.rhs,
                            y0: p.y0,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(Workloads::Real(loads))
            }
            ProblemSpec::Lattice { .. } => {
                Err(HarnessError::Input("the lattice problem runs through the `lattice` subcommand".into()))
            }
        }
    }
}
