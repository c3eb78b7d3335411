//! Sequence backbones mapping an observed prefix to a hidden state, the two
//! output heads, and model checkpoints.
//!
//! The conv-shapelet backbone runs causal convolutions of growing width and
//! keeps a running maximum of every feature map, so `h_t` only depends on
//! `x_0..=x_t`. The stacked LSTM carries its state forward one frame at a
//! time. Both are evaluated for all prefixes of a series in one pass.

mod checkpoint;
mod conv;
mod lstm;
mod model;
mod params;

pub use checkpoint::{BatchNormStats, Checkpoint, RunMeta, MAGIC};
pub use conv::ConvShapeletConfig;
pub use lstm::{LstmConfig, LstmState};
pub use model::{BackboneConfig, BackboneKind, EarlyClassifier, Forward, ModelConfig, SeriesPrediction};
pub use params::{Bound, NamedArray, Param, ParamStore};
