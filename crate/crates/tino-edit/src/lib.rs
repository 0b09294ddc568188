//! Image editing by direct optimization of diffusion inputs.
//!
//! The engine encodes an image into a latent, corrupts it with a noise
//! tensor, denoises it through an unrolled deterministic chain, and then
//! gradient-updates both the noise and every per-step timestep against
//! latent-domain semantic and perceptual losses — with a task-specific mask
//! pinning everything outside the edit region to the original. Toy backends
//! make the whole pipeline runnable and testable without any pre-trained
//! weights; real backbones plug in through the model-directory adapter.

pub mod autodiff;
pub mod backends;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod optimizer;
pub mod par;
pub mod perception;
pub mod pixel;

pub use error::{Result, TinoError};
