//! Locally and globally normalized sequence models trained with teacher
//! forcing, self-normalization, and a differentiable relaxation of beam search.

pub mod beam;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod runner;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Padding id; also the gold token past EOS in fixed-length relaxed decoding.
pub const PAD: usize = 0;
/// Start-of-sequence id fed to the first decoder step.
pub const BOS: usize = 1;
/// End-of-sequence id for variable-length outputs.
pub const EOS: usize = 2;
/// Number of reserved ids at the front of every target vocabulary.
pub const RESERVED: usize = 3;
