//! Toy latent-diffusion backbone: an exact RGBA latent codec, a DDPM
//! schedule, a UNet whose attention sublayers carry SDXL-style names and
//! expose hooks, and a deterministic DDIM sampler.

mod blocks;
mod codec;
mod sampler;
mod schedule;
mod text;
mod unet;

pub use blocks::{
    AuditLog, AuditRecord, BlockInfo, BlockPath, BlockRegistry, HookHandle, HookRecord, InjectionEvent,
    Observer,
};
pub use codec::{
    depth_to_space, space_to_depth, space_to_depth_factor, ImageRGBA, LatentCodec, LatentTensor, CODEC_SEED,
    DEFAULT_IMAGE_SIZE, IMAGE_CHANNELS, LATENT_CHANNELS, PATCH,
};
pub use sampler::{ddim_sample, ddim_sample_from, ddim_sample_with, ddim_step, ddim_timesteps, DEFAULT_DDIM_STEPS};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use text::{TextEncoder, TokenSequence, BOS, FACE_MARKER};
pub use unet::{
    sinusoidal_embedding, ConditioningBundle, ControlResiduals, ForwardArgs, ResidualVars, UNetConfig,
    UNetContext, UNetOutputs,
};

pub(crate) use unet::{encoder, is_encoder_param, time_embedding, AttnEnv, Scope, UNET_PREFIX};
