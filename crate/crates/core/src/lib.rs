//! Two-scale transformer for blind image quality assessment, with
//! scale-contrastive regularisation and selective top-k focus attention,
//! built on a small reverse-mode autodiff engine over `f64` tensors.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scl;
pub mod sfa;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
