//! Dynamical low-rank approximation of matrix ODEs `dA/dt = F(t, A)` with
//! parallel basis-update & Galerkin (BUG) integrators.
//!
//! A solution is kept as `Y = U S V^H` ([`LowRankState`]). Each macro step
//! integrates the K-, L- and S-substeps ([`solver`]) through the projected
//! right-hand-side evaluations of a [`MatrixOde`], assembles an augmented
//! coefficient matrix, and truncates it ([`truncate`]).
//!
//! ```
//! use dlra::{evolve, EvolveConfig, Executor, IntegratorVariant, SolverConfig, StepOptions, TruncationPolicy};
//! use dlra::problems::{schrodinger_build, schrodinger_initial};
//!
//! let problem = schrodinger_build(16).unwrap();
//! let (y0, _) = schrodinger_initial(16, 4, 7).unwrap();
//! let opts = StepOptions::new(SolverConfig::rk4(2), TruncationPolicy::fixed_rank(4));
//! let cfg = EvolveConfig::new(IntegratorVariant::Parallel2V1, 0.1, 0.02, opts);
//! let run = evolve(&y0, &problem.rhs, &cfg, &Executor::serial()).unwrap();
//! assert_eq!(run.records.len(), 6);
//! ```

pub mod error;
pub mod integrators;
pub mod lowrank;
pub mod problems;
pub mod rhs;
pub mod scalar;
pub mod solver;
pub mod sparse;

pub use error::{DlraError, Result};
pub use integrators::{
    evolve, evolve_with, rejection_estimate, step, EvolveConfig, EvolveFailure, Executor, IntegratorVariant, Rejection,
    RunRecord, StepDetail, StepOptions, StepResult, Trajectory,
};
pub use lowrank::{
    normal_component_norm, orth, random_lowrank, tangent_project, truncate, LowRankState, SingularValueLaw, TruncationMode,
    TruncationPolicy,
};
pub use rhs::{cost_estimate, CostReport, FactorTerm, FnOde, MatrixOde, SumFactorRhs};
pub use scalar::{Field, Scalar};
pub use solver::{integrate, SolverConfig, SubstepMethod, SubstepStats};
pub use sparse::CsrMatrix;
