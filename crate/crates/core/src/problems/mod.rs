//! Benchmark problems.

pub mod lattice;
pub mod pn;
pub mod schrodinger;
pub mod synthetic;

pub use lattice::{lattice_build, lattice_build_with, lattice_initial, lattice_scalar_flux, LatticeLayout, LatticeProblem, Material};
pub use pn::{pn_flux_matrices, PnMatrices};
pub use schrodinger::{schrodinger_build, schrodinger_initial, schrodinger_initial_full, SchrodingerProblem};
pub use synthetic::{synthetic_exact, SyntheticKind, SyntheticProblem};
