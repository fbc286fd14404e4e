//! Persistence of bundles, adapters and coefficient tensors, and the
//! deterministic toy-bundle generator.

mod bundle;
mod coef;
mod container;
mod toy;

pub use bundle::{
    load_adapter, load_bundle, lora_from_tensors, lora_to_tensors, save_adapter, save_bundle, BaseWeights,
    BlockWeights, ModelBundle,
};
pub use coef::{load_coefficients, CoefficientFile};
pub use container::{read_checkpoint, write_checkpoint, DType, Tensor, TensorSet, MAGIC, VERSION};
pub use toy::{gen_toy_bundle, toy_modalities, ToyModalityOptions};
