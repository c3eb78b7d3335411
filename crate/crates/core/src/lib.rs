//! Early classification of time series with a learned stopping rule.
//!
//! A backbone turns every observed prefix into a hidden state; one head
//! classifies it and another emits the probability of stopping there. The
//! stopping probabilities define a distribution over decision times, and
//! the training loss is the expected accuracy/earliness cost under it.

pub mod backbones;
pub mod dataio;
pub mod error;
pub mod evalreport;
pub mod halting;
pub mod ndtensor;
pub mod objective;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = ndtensor::Tensor<f64>;
pub type Tape64 = ndtensor::Tape<f64>;
pub type Series = dataio::LabeledSeries<f64>;
pub type Dataset = dataio::Dataset<f64>;
pub type Model = backbones::EarlyClassifier<f64>;
pub type Model32 = backbones::EarlyClassifier<f32>;
pub type Trace = halting::HaltingTrace<f64>;
