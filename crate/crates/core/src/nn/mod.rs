//! Deterministic tensor and transformer kernels shared by every model.

pub mod adam;
pub mod graph;
pub mod layer;
pub mod meter;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Binder, Graph, Var};
pub use layer::{decoder_layer_forward, DecoderLayer, KVCache};
pub use meter::Meter;
pub use ops::{attention, greedy_argmax, softmax};
pub use params::{seeded_init, seeded_tensor, ModelConfig, ParamSet};
pub use tensor::Tensor;
