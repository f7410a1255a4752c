//! Iterative latent editing with diffusion-style samplers, analytic and tiny
//! trainable denoisers, and a simulated lossy codec.

pub mod codec;
pub mod config;
pub mod denoiser;
pub mod editor;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod verify;

pub use codec::{Codec, CodecConfig};
pub use denoiser::{
    bayes_loss_estimate, ConditionalDenoiser, Denoiser, EditInstruction, GmmComponent,
    GmmDenoiser, GmmPrior,
};
pub use editor::{open_session, EditSession, SessionConfig, Strategy};
pub use error::{Error, Result};
pub use grid::{Dims, LatentGrid, Mask, RngStream};
pub use sampler::{LangevinConfig, MaskMode, ReverseMethod, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use training::{TinyDenoiser, TrainConfig};
