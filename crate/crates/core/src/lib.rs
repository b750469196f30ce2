//! Semi-supervised instance segmentation laboratory.
//!
//! A self-contained teacher–student pipeline over procedurally generated
//! scenes: a promptable oracle segmenter stands in for a segmentation
//! foundation model, a small query-based network is trained with structural
//! distillation from the oracle's features, pseudo-labels on unlabeled
//! scenes are refined by stochastic point prompting, and refined labels
//! drive bidirectional instance-paste augmentation. Everything is
//! deterministic given a seed.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod util;

pub mod oracle;
pub mod segmodel;
pub mod synthdata;

pub use error::{Error, Result};
