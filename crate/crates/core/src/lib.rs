//! Doubly robust treatment effect estimation for longitudinal data with
//! latent state dynamics.
//!
//! The pipeline: latent states from a Gaussian-emission HMM, propensity
//! scores from a SCAD-penalized empirical likelihood under covariate
//! balancing moments, SCAD-penalized per-arm outcome regressions with latent
//! state features, a small multi-graph convolutional next-step predictor, and
//! a (weighted) doubly robust ATE estimator. [`experiment`] runs the whole
//! thing as a seeded Monte Carlo study.

pub mod config;
pub mod datamodel;
pub mod dr;
pub mod elopt;
pub mod error;
pub mod experiment;
pub mod hmm;
pub mod metrics;
pub mod mtgcn;
pub mod outcome;
pub mod propensity;
pub mod seed;
pub mod synthdgp;

pub use error::{Error, Result};
