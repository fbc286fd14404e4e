//! Embedding-signal merging of modality-specialized LoRA adapters.
//!
//! The crate runs a small LLaMA-style decoder over multimodal probe
//! sequences, measures how each specialized adapter moves modality tokens
//! away from the base model, and turns those measurements into merge
//! weights:
//!
//! * layer-wise weights from sliced Wasserstein distances between pooled
//!   base and specialized embeddings ([`signals::layer_coefficients`]);
//! * element-wise weights from accumulated absolute gradients of the
//!   per-layer embedding distance ([`grad::accumulate_sensitivity`],
//!   [`signals::element_coefficients`]);
//! * their renormalized product ([`merge::integrate`]), applied as a
//!   weighted sum of adapter factors ([`merge::merge_adapters`]).
//!
//! Average and TIES merging are provided as baselines.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod grad;
pub mod lora;
pub mod merge;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod signals;
pub mod tensor;

pub use checkpoint::{gen_toy_bundle, read_checkpoint, toy_modalities, write_checkpoint, ModelBundle, TensorSet};
pub use config::{ModelConfig, Target};
pub use error::{Error, Result};
pub use grad::{accumulate_sensitivity, backward_r_layer, distance_r, fd_grad, SensitivityAccumulator};
pub use lora::{ElementCoord, Factor, LoraAdapter, LoraPair, LoraParams};
pub use merge::{avg_merge, integrate, merge_adapters, ties_merge, CoefficientSource, FusedCoefficients};
pub use model::{extract_modality, forward_with_trace, Span, TokenSequence, TraceSet};
pub use probe::{build_probe_batch, collect_layer_sets, mean_pool, ModalitySpec, ProbeBatch};
pub use signals::{
    element_coefficients, layer_coefficients, layer_deltas, swd, wasserstein_1d, zscore, ElementCoefficients,
    LayerCoefficients, SwdTable,
};
pub use tensor::Mat;
