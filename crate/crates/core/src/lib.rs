//! Transformer motion captioning with windowed self-attention and
//! controlled, center-tracking cross-attention, built on a small f64
//! reverse-mode autodiff tape.

pub mod attention;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use attention::{AttentionMap, CrossWindow, Radius, SelfWindow};
pub use dataset::{PoseSequence, Sample, SegmentAnnotation, Vocab};
pub use error::{Error, Result};
pub use metrics::{Interval, SyncReport};
pub use model::{Checkpoint, Model, ModelConfig};
pub use objectives::{LossBreakdown, LossWeights};
pub use tape::{grad_check, grad_check_many, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainLog};
