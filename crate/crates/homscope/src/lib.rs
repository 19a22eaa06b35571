//! Simulation and estimation toolkit for two-colour entangled Hong-Ou-Mandel
//! depth microscopy.
//!
//! The crate covers the full chain of a HOM depth microscope in simulation:
//!
//! - [`model`]: closed-form interference probabilities of degenerate and
//!   two-colour photon pairs, and delay/thickness/detuning conversions.
//! - [`detectors`]: the 2x(1x4) multiplexed quasi-photon-number-resolving
//!   detection scheme, coincidence classification and Klyshko calibration.
//! - [`acquisition`]: seeded Monte Carlo generation of coincidence tallies,
//!   with optional phase-noise models.
//! - [`inference`]: Fisher information, Cramer-Rao bounds, maximum-likelihood
//!   delay estimation and precision statistics.
//! - [`scene`]: synthetic samples, raster-scan imaging and the precision
//!   experiments (two-step histograms, single-pixel sweeps, coarse-to-fine
//!   scan planning lives in [`inference`]).
//!
//! All delays are carried in seconds, lengths in meters, rates in hertz.
//! Every stochastic routine takes an explicit seed or generator and is
//! bit-reproducible; parallel scans derive one seed per pixel so results do
//! not depend on scheduling.

// Validation deliberately uses negated comparisons (`!(x > 0.0)`) so that
// NaN inputs fail the checks too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod detectors;
pub mod error;
pub mod inference;
pub mod model;
pub mod scene;

pub use error::{Error, Result};
