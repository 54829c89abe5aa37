//! Simulation and verification toolkit for the centered Fleming-Viot
//! process with Brownian mutation.
//!
//! The crate is organised by role:
//!
//! * [`measure`] empirical measures, centering, moment and distance functionals
//! * [`poly`] sparse multivariate polynomials and the operators acting on them
//! * [`semigroup`] the Gaussian transition semigroup of the particle system
//! * [`coalescent`] Kingman trees and the look-down construction
//! * [`genealogy`] backward genealogy sampling, invariant law and coupling
//! * [`moran`] forward Moran particle simulation
//! * [`dual`] the moment dual and the duality identity
//! * [`analysis`] martingale residual diagnostics and the ergodicity experiment
//! * [`verify`] the acceptance criteria, runnable from tests and the CLI

pub mod analysis;
pub mod coalescent;
pub mod dual;
pub mod error;
pub mod genealogy;
pub mod measure;
pub mod moran;
pub mod poly;
pub mod seed;
pub mod semigroup;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use measure::{CenteredMeasure, EmpiricalMeasure};
pub use poly::Polynomial;
pub use stats::Estimate;
