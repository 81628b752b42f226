//! Rating-migration models with risk-neutral recalibration and
//! collateral-inclusive XVA.
//!
//! The crate builds a piecewise-homogeneous continuous-time Markov chain
//! for credit ratings, calibrated jointly to published transition
//! matrices (historical measure) and CDS-implied default probabilities
//! (risk-neutral measure) through an exponential change of measure. The
//! calibrated model drives exact stochastic simulation of rating paths,
//! which in turn feed a bilateral collateralized exposure engine with
//! rating-dependent CSA thresholds.
//!
//! Modules, bottom-up:
//!
//! * [`matfun`] — dense matrix exponential/logarithm and generator repair,
//! * [`rating`] — domain types and CSV ingestion,
//! * [`optim`] — bound-constrained Levenberg–Marquardt,
//! * [`calibration`] — withdrawal adjustment, generator extraction and the
//!   penalized change-of-measure calibration,
//! * [`simulation`] — exact path simulation, empirical estimators and the
//!   measure-change density along paths,
//! * [`xva`] — portfolio/collateral simulation and CDVA/CCVA/CBVA,
//! * [`config`] / [`cli`] — run configuration and the pipeline commands
//!   behind the `rating-xva` binary.
//!
//! The `examples/` directory carries one runnable example per capability;
//! start with `cargo run --release --example calibrate_model`.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod error;
pub mod matfun;
pub mod optim;
pub mod rating;
pub mod simulation;
pub mod xva;

pub use error::{Error, Result};
