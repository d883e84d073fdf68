//! Rank-1 attribute adapters for debiasing a small conditional diffusion model.
//!
//! The numeric core ([`nn`], [`diffusion`], [`adapter`]) is generic over the [`Scalar`]
//! element type; the experiment layers above it run in `f64`.

pub mod adapter;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod inference;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod svg;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type LinearLayer = nn::LinearLayer<f64>;
pub type CrossAttentionBlock = nn::CrossAttentionBlock<f64>;
pub type DenoiserModel = nn::DenoiserModel<f64>;
pub type DenoiserModel32 = nn::DenoiserModel<f32>;
pub type AdapterView<'a> = nn::AdapterView<'a, f64>;
pub type Gradients = nn::Gradients<f64>;
pub type NoiseSchedule = diffusion::NoiseSchedule<f64>;
pub type SampleTrajectory = diffusion::SampleTrajectory<f64>;
pub type AdapterPair = adapter::AdapterPair<f64>;
pub type AttributeAdapter = adapter::AttributeAdapter<f64>;
pub type AdapterBank = adapter::AdapterBank<f64>;
