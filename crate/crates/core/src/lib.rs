//! Expression recognition with identity and pose disentangled in feature
//! space: a frozen identity encoder, trainable pose and expression encoders
//! whose features sum to a holistic representation, a shared decoder that
//! synthesizes neutral and expressional faces, and an expression
//! discriminator, trained by three-phase alternating optimization on a
//! procedurally generated dataset with known factors.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod factorgen;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
