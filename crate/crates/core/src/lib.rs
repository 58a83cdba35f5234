//! Activation maximization through a learned generator prior.
//!
//! The crate trains a small classifier, trains an upconvolutional generator
//! to invert the classifier's feature codes, and then synthesizes preferred
//! stimuli for chosen units by gradient ascent in the generator's code
//! space. Pixel-space baselines, dataset modifications, and analysis tools
//! for the resulting images sit alongside.

pub mod am;
pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
