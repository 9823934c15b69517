//! Hierarchical Bayesian conditional autoregressive (CAR) models for
//! spatiotemporal areal count data, fitted with a built-in NUTS sampler.

pub mod commands;
pub mod data;
pub mod error;
pub mod forecast;
pub mod graph;
pub mod io;
pub mod model;
pub mod parallel;
pub mod posterior;
pub mod sampler;
pub mod synth;

pub use data::Dataset;
pub use error::{Error, Result};
pub use graph::{build_graph, ArealGraph};
pub use model::{ModelSpec, ModelVariant, Parameters};
pub use sampler::{run_inference, PosteriorDraws, SamplerConfig};
