//! Graph variational autoencoder for periodic atomic configurations.
//!
//! The pipeline reads molecular-dynamics snapshots ([`trajio`]), turns each
//! into a cutoff graph under the minimum-image convention
//! ([`periodic_graph`]), trains a dual-path encoder/decoder with an energy
//! head ([`model`], [`losses`], [`trainer`]) and samples or refines latent
//! codes to produce new structures ([`generator`]). Gradients come from the
//! small reverse-mode engine in [`autodiff`].
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which is what the command-line tool uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod batch;
pub mod diagnostics;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod periodic_graph;
pub mod scalar;
pub mod synthetic;
pub mod trainer;
pub mod trajio;

pub use error::{Error, Result};
pub use generator::{generate_conditional, sample_random, GenConfig, Refinement, TargetWindow};
pub use losses::{total_loss, LossBreakdown, LossWeights};
pub use metrics::{evaluate, rdf_compare, MetricsReport};
pub use model::{
    decode, encode, predict_energy, LatentCode, ModelConfig, ModelParams, ReconstructionOutput,
};
pub use periodic_graph::{build_graph, compute_rdf, ConfigGraph, RdfConfig, RdfMode};
pub use scalar::Scalar;
pub use trainer::{train, Checkpoint, TrainConfig};
pub use trajio::{AtomicConfiguration, Dataset, EnergyNormalizer, SpeciesMap};

pub type Tensor = autodiff::Tensor<f64>;
pub type Configuration = trajio::AtomicConfiguration<f64>;
pub type Graph = periodic_graph::ConfigGraph<f64>;
pub type Params = model::ModelParams<f64>;
pub type Code = model::LatentCode<f64>;
pub type Reconstruction = model::ReconstructionOutput<f64>;
pub type Weights = losses::LossWeights<f64>;
pub type Breakdown = losses::LossBreakdown<f64>;
pub type Training = trainer::TrainConfig<f64>;
pub type Generation = generator::GenConfig<f64>;
pub type Report = metrics::MetricsReport<f64>;
pub type Normalizer = trajio::EnergyNormalizer<f64>;
pub type Data = trajio::Dataset<f64>;
