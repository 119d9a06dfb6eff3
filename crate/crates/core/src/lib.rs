//! Multi-task dense prediction network with a two-branch backbone,
//! top-down feature aggregation and task-adaptive gating.

pub mod aggregation;
pub mod backbone;
pub mod config;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod heatmap;
pub mod heads;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod synth;
pub mod tag;
pub mod train;
pub mod verify;
pub mod tensor;

pub use config::{BackboneConfig, InputSize, TaskKind, Toggles};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use model::MultiTaskNet;
pub use tensor::Tensor;
