//! Bayesian neural network toolkit: a reverse-mode tape, multilayer
//! perceptrons, log-joint models, samplers, variational and point-mixture
//! approximations, predictive summaries, calibration metrics and
//! distillation.

pub mod approx;
pub mod calibration;
pub mod data;
pub mod distill;
pub mod error;
pub mod mcmc;
pub mod model;
pub mod network;
pub mod optim;
pub mod predictive;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod vi;

pub use error::{Error, Result};
