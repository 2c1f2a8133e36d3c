//! Pitch diffusion: a Gaussian process on F0 and a multinomial process on
//! voicing, denoised jointly by one network.

pub mod denoiser;
pub mod gaussian;
pub mod multinomial;
pub mod sampler;
pub mod schedule;

pub use denoiser::{PitchDenoiser, WaveNet, WaveNetConfig};
pub use gaussian::{gaussian_forward, gdiff_loss};
pub use multinomial::{mdiff_loss, multinomial_forward, multinomial_posterior};
pub use sampler::{sample_pitch, PitchSample};
pub use schedule::DiffusionSchedule;
