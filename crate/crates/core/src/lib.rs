//! Adaptive reduced-basis hierarchical ensemble Kalman filters.
//!
//! The crate bundles a P1 finite-element quasi-geostrophic model, POD-Galerkin
//! surrogates retrained online by inflation and deflation, and the multi-level
//! and multi-fidelity ensemble Kalman filters that consume them.

pub mod config;
pub mod error;
pub mod fem;
pub mod filters;
pub mod harness;
pub mod linalg;
pub mod pod;
pub mod priors;
pub mod qge;
pub mod rng;
pub mod rom;
pub mod store;

pub use error::{Error, Result};
pub use fem::{assemble_operators, build_mesh, FemOperators, Mesh, ObservationVector, StateVector};
pub use qge::{QgeModel, QgeParams, Trajectory};
pub use config::{ExperimentConfig, FilterKind, InitialSpace, PriorKind};
pub use filters::{EnsembleSet, Observation};
pub use pod::{ReducedSpace, Space};
