//! Partial-order guided multi-view action recognition at desk scale.

pub mod apog;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod ofd;
pub mod params;
pub mod partition;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vdg;

pub use error::{Error, Result};
pub use tensor::Tensor;
