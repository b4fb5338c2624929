//! Feature-wise linear modulation on a synthetic grid-world VQA task.
//!
//! The crate is organised in layers:
//!
//! * [`tensor`], [`graph`], [`ops`], [`adam`], [`gradcheck`] — a small
//!   reverse-mode autodiff engine, generic over the scalar type.
//! * [`film`] — the modulation mechanics themselves: gamma transforms,
//!   coordinate maps, the modulated residual block.
//! * [`model`], [`checkpoint`] — the question-conditioned CNN and its
//!   serialisation format.
//! * [`worldgen`] — scene sampling, rasterisation, question generation and
//!   the ground-truth program evaluator.
//! * [`train`], [`analysis`], [`zeroshot`] — the training harness and the
//!   experiment tooling built on top of it.
//! * [`config`], [`cli`] — run configuration and the command-line surface.
//!
//! Compute defaults to `f32`; everything numeric can be re-instantiated at
//! `f64` (gradient checking does exactly that). The aliases below pin the
//! two supported instantiations.

pub mod adam;
pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod film;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod worldgen;
pub mod zeroshot;

pub use error::Error;
pub use graph::Graph;
pub use model::Model;
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
