//! Fourier neural operators turned into function-valued Gaussian processes.
//!
//! The pipeline: train an FNO ([`fno`], [`train`]), place a Gaussian belief
//! on the parameters of its final Fourier block ([`belief`]), and push that
//! belief through the linearized last block to obtain a lazily evaluable
//! Gaussian process over output functions ([`luno`]). [`baselines`] holds the
//! sample-based comparison methods, [`pde`] the synthetic data generators and
//! [`eval`] the metrics, calibration and rollouts.

pub mod baselines;
pub mod belief;
pub mod error;
pub mod eval;
pub mod field;
pub mod fno;
pub mod luno;
pub mod pde;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use field::{Field, Grid, Points, SpectralField};
pub use fno::{Activation, FnoConfig, FnoModel};
