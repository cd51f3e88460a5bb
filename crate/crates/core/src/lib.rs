//! Sequential slice segmentation with a distance-aware memory attention.
//!
//! The crate carries its own small tensor and reverse-mode autodiff engine,
//! a patch transformer encoder with LoRA adapters on the query and value
//! projections, a causal memory bank over earlier slices, losses and the
//! Dice metric, binary raster and checkpoint formats, a synthetic dataset
//! generator, and the train / evaluate / infer drivers used by the CLI.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod lora;
pub mod memory;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, SegModel, SequenceOptions};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
