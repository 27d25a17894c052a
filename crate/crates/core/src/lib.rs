//! Equilibrium Aggregation: permutation-invariant pooling defined as the
//! minimizer of a learned energy over a candidate aggregate, plus the
//! classical pooling baselines it generalizes.

pub mod aggregation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod inner;
pub mod layers;
pub mod model;
pub mod params;
pub mod potentials;
pub mod report;
pub mod run;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
