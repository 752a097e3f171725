//! Experiment pipeline behind the `cbct-autofocus` command.

pub mod config;
pub mod pipeline;

pub use config::Config;
pub use pipeline::Run;
