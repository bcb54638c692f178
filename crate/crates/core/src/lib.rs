//! Parameter-efficient in-context tuning for few-shot molecular property
//! prediction: a frozen GIN-style encoder with context-conditioned adapters,
//! consolidated embedding fine-tuning and episodic first-order meta-training.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod chem;
pub mod consolidation;
pub mod context;
pub mod encoder;
pub mod error;
pub mod meta;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
