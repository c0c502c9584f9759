pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod datasets;
pub mod error;
pub mod features;
pub mod gpt;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod verify;

pub use error::{Error, Result};
