//! Distribution matching distillation cast as a policy-gradient reward, on
//! analytic Gaussian-mixture teachers.
//!
//! The crate is split bottom-up: [`numerics`] (arrays, MLP, RNG),
//! [`schedule`], [`teacher`], [`nets`] (student and fake denoiser),
//! [`rewards`], [`policy`], [`trainer`], [`metrics`] and [`harness`]
//! (config, CLI commands, plots).

pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod policy;
pub mod rewards;
pub mod schedule;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
