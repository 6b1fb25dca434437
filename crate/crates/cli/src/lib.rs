//! Face de-identification pipeline and the `deid-forge` commands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod pipeline;

pub use commands::{cmd_deid, cmd_eval, cmd_gen_toy, cmd_train};
pub use config::{Overrides, PipelineConfig};
pub use pipeline::Deidentifier;
