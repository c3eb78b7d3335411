//! Adam, the two training phases and cross-validated model selection.

mod adam;
mod grid;
mod train;
#[cfg(test)]
mod tests;

pub use adam::{adam_step, clip_grad_norm, AdamHyper, AdamState};
pub use grid::{grid_search_cv, ConvAxes, CvReport, CvRow, CvSettings, GridPoint, GridSpec, LstmAxes};
pub use train::{
    train_phase1, train_phase2, write_log, EpochRecord, Phase, TrainConfig, DEFAULT_BATCH_SIZE,
    DEFAULT_LEARNING_RATE, LSTM_CLIP_NORM,
};
