//! GAN-based singing voice acoustic model.
//!
//! A FastSpeech-style generator built from ConvFFT blocks maps a musical score
//! to 120-bin log-mel, V/UV and logF0 frames. It is trained against a
//! multi-band discriminator whose low, middle and high mel bands each carry
//! segment discriminators (1-d CNNs over random clips) and detail
//! discriminators (dilated 2-d PatchGAN critics).

mod error;

pub mod checkpoint;
pub mod dataio;
pub mod discriminator;
pub mod eval;
pub mod frontend;
pub mod generator;
pub mod layers;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
