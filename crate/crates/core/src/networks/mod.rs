//! The deblurring generator and the PatchGAN critic.

mod critic;
mod generator;

pub use critic::{critic_output_size, PatchCritic, CRITIC_BASE_WIDTH, CRITIC_MIN_SIZE};
pub use generator::{Generator, GeneratorOutput, ENCODER_WIDTHS};
