//! Prompt-oriented view-agnostic learning for egocentric hand-object
//! interaction recognition, at desk scale.
//!
//! The crate contains a small video transformer with frame-level interactive
//! masking prompts and token-level view-aware prompts, the training
//! objectives for each stage, a deterministic synthetic multi-view world
//! standing in for real multi-camera datasets, and the evaluation protocols.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompts;
pub mod real;
pub mod rng;
pub mod training;
pub mod world;

pub use config::ModelConfig;
pub use error::{PovError, Result};
pub use model::{parameter_partition, ModelState, TokenSequence};
pub use params::Partition;
pub use prompts::{JointPrompt, ViewPromptBank};
