//! Password-keyed image encryption built on an invertible affine-coupling
//! network.
//!
//! A password derives a balanced split mask and a secret map. The mask
//! splits the image into two half-width streams, a stack of invertible
//! blocks conditioned on the secret map scrambles them, and the streams are
//! merged back into a noise-like cipher canvas. The same parameters run the
//! blocks in reverse to decrypt.

pub mod error;
pub mod evaluation;
pub mod fed;
pub mod imageio;
pub mod keygen;
pub mod losses;
pub mod metrics;
pub mod noise;
pub mod pipeline;
pub mod numerics;
pub mod splitmerge;
pub mod training;

pub use error::{Error, Result};
