//! Learning well-conditioned Gaussian mixtures with diffusion models.

pub mod clustering;
pub mod config;
pub mod evaluation;
pub mod io;
pub mod learning;
pub mod linalg;
pub mod mixture;
pub mod parallel;
pub mod pipeline;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod score_model;
pub mod spectral;
