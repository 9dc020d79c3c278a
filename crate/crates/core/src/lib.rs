//! Infrared/visible image fusion with a graph interaction network, built on a
//! small reverse-mode autodiff engine.

pub mod backbone;
pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gim;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::FusionConfig;
pub use error::{Error, Result};
pub use params::{Modality, NetworkParams};
pub use tensor::{Tape, Tensor, Var};
