//! Two-stage multimodal stance detection pipeline.
//!
//! Stage one extracts stance-relevant context: an LLM-style summarizer
//! condenses the source text and a domain-aware captioner describes the
//! image, both behind swappable stub/external backends. Stage two encodes
//! summary, image and transcript+caption with toy transformer encoders,
//! projects the three representations into a shared space, fuses them by
//! concatenation and classifies the stance as support / oppose / neutral.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]); the
//! pipeline itself runs in f64; see the crate-root aliases below.

pub mod context;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod jtmo;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Pipeline-default tensor (f64).
pub type Tensor = tensor::Tensor<f64>;
/// Pipeline-default parameter store (f64).
pub type ParamStore = tensor::ParamStore<f64>;
/// Pipeline-default autodiff graph (f64).
pub type Graph = tensor::graph::Graph<f64>;
