//! Denoising backbone: noise schedule, the toy U-Net with observable
//! attention maps, and the latent codec.

mod attention;
mod schedule;
mod unet;

pub use attention::{mean_attention, AttentionLayerMaps, AttentionRecord};
pub use schedule::{add_noise, add_noise_batch, add_noise_with_alpha_bar, NoiseSchedule};
pub use unet::{BackboneConfig, CondBatch, CrossAttentionBias, DiffusionInput, UNet};

use candle_core::{Device, Tensor};

use crate::error::Result;
use crate::imageops::Image;

/// Maps images to and from the space the backbone denoises.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &Image, device: &Device) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Image>;
}

/// Identity codec: the latent is the image itself, scaled to `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &Image, device: &Device) -> Result<Tensor> {
        image.to_tensor(device)
    }

    fn decode(&self, latent: &Tensor) -> Result<Image> {
        Image::from_tensor(latent)
    }
}
