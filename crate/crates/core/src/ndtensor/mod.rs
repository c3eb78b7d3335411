//! Minimal dense-array reverse-mode differentiation engine.
//!
//! Only the operations needed by the sequence backbones, the two output
//! heads and the losses are provided. See [`Tape`] for the recording model.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GRADCHECK_FLOOR, GRADCHECK_STEP};
pub use tape::{segments_from_lengths, BatchNormState, DiffNode, NodeId, Segment, Tape, HALT_CLAMP};
pub use tensor::{Shape, Tensor};

pub(crate) use tape::check_segments;
