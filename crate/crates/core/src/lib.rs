//! Blur-attention GAN for blind motion deblurring.
//!
//! The generator encodes a blurred image, passes the features through a chain
//! of blur-attention modules (dense block + spatial attention) with multilevel
//! residual connections, decodes a residual and adds it back to the input. A
//! PatchGAN Wasserstein critic and a VGG19 perceptual loss drive training.

pub mod ablation;
pub mod archive;
pub mod blocks;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod training;

pub use error::{BagError, Result};
