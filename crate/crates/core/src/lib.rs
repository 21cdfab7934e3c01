//! Retrieval-augmented, structure-conditioned volumetric generation at
//! desk scale: procedural phantoms, a contrastive dual encoder, a
//! rectified-flow latent diffusion backbone with a zero-initialized
//! control branch, retrieval policies, and an evaluation suite.

pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tape, Tensor, ValueId};
