//! The trainable model: U-Net and content adaptor sharing one variable
//! map, plus the frozen tokenizer, encoders and noise schedule.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, IdentityCodec, LatentCodec, NoiseSchedule, UNet};
use crate::embedding::{
    build_multimodal_embedding, encode_objects, tokenize_with_grounding, Adaptor, AdaptorConfig,
    ConditioningInputs, HashTextEncoder, ImageEncoder, MultimodalEmbedding, PatchProjectionEncoder,
    TextEncoder, TextTokenizer, ToyTokenizer,
};
use crate::error::{Error, Result};
use crate::imageops::Image;

/// Everything needed to rebuild a [`Model`] with identical shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Adapted tokens per object (`K`).
    pub object_tokens: usize,
    /// Side length object images are resized to before encoding.
    pub object_size: usize,
    pub patch_size: usize,
    pub image_feature_dim: usize,
    pub adaptor_hidden: usize,
    pub max_word_piece: usize,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            object_tokens: 4,
            object_size: 16,
            patch_size: 4,
            image_feature_dim: 32,
            adaptor_hidden: 64,
            max_word_piece: 6,
            encoder_seed: 0x5eed,
        }
    }
}

impl ModelConfig {
    pub fn adaptor(&self) -> AdaptorConfig {
        AdaptorConfig {
            feature_dim: self.image_feature_dim,
            hidden_dim: self.adaptor_hidden,
            out_dim: self.backbone.cond_dim,
            num_tokens: self.object_tokens,
            num_patches: (self.object_size / self.patch_size).pow(2),
        }
    }
}

/// Padding color for object images that are not square.
pub const OBJECT_PAD: [f32; 3] = [0.5, 0.5, 0.5];

pub struct Model {
    pub cfg: ModelConfig,
    pub schedule: NoiseSchedule,
    pub unet: UNet,
    pub adaptor: Adaptor,
    pub tokenizer: ToyTokenizer,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub image_encoder: Arc<dyn ImageEncoder>,
    pub codec: Arc<dyn LatentCodec>,
    varmap: VarMap,
    device: Device,
    dtype: DType,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("cfg", &self.cfg)
            .field("dtype", &self.dtype)
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Builds the model with weights drawn from a generator seeded by `seed`.
    pub fn new(cfg: ModelConfig, schedule: NoiseSchedule, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let unet = UNet::new(cfg.backbone, vb.pp("unet"))?;
        let adaptor = Adaptor::new(cfg.adaptor(), vb.pp("adaptor"))?;
        let model = Model {
            cfg,
            schedule,
            unet,
            adaptor,
            tokenizer: ToyTokenizer {
                max_piece: cfg.max_word_piece,
                ..Default::default()
            },
            text_encoder: Arc::new(HashTextEncoder::new(cfg.backbone.cond_dim, cfg.encoder_seed)),
            image_encoder: Arc::new(PatchProjectionEncoder::new(
                cfg.object_size,
                cfg.patch_size,
                cfg.image_feature_dim,
                cfg.encoder_seed.wrapping_add(1),
            )),
            codec: Arc::new(IdentityCodec),
            varmap,
            device: device.clone(),
            dtype,
        };
        model.reinitialize(seed)?;
        Ok(model)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Trainable variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn num_parameters(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Re-draws every weight from a seeded generator: matrices and kernels
    /// uniform in `±1/sqrt(fan_in)`, norm scales one, biases zero, pooling
    /// logits `N(0, 0.02)`.
    pub fn reinitialize(&self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in self.named_vars() {
            let dims = var.dims().to_vec();
            let n = var.elem_count();
            let values: Vec<f32> = if name.ends_with("pool") {
                let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if dims.len() >= 2 {
                let fan_in: usize = dims[1..].iter().product();
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name.ends_with("weight") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            let t = Tensor::from_vec(values, dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Resizes an object image to the encoder resolution, padding to square.
    pub fn prepare_object(&self, image: &Image) -> Image {
        let s = self.cfg.object_size;
        if image.dims() == (s, s) {
            image.clone()
        } else {
            image.resize_padded(s, OBJECT_PAD)
        }
    }

    /// Builds the multimodal conditioning sequence for one sample.
    pub fn embed(&self, inputs: &ConditioningInputs) -> Result<MultimodalEmbedding> {
        let tok = tokenize_with_grounding(&inputs.caption, &self.tokenizer as &dyn TextTokenizer)?;
        let text = self.text_encoder.encode(&tok, &self.device, self.dtype)?;
        let objects: Vec<(usize, Image)> = inputs
            .objects
            .iter()
            .map(|(i, img)| (*i, self.prepare_object(img)))
            .collect();
        let blocks = encode_objects(&objects, self.image_encoder.as_ref(), &self.adaptor, &self.device, self.dtype)?;
        build_multimodal_embedding(&tok, &text, &blocks)
    }

    /// Snapshot of every weight, sorted by name.
    pub fn weights(&self) -> Vec<(String, Tensor)> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites weights by name; every model variable must be present.
    pub fn load_weights(&self, weights: &[(String, Tensor)]) -> Result<()> {
        for (name, var) in self.named_vars() {
            let (_, t) = weights.iter().find(|(k, _)| *k == name).ok_or_else(|| {
                Error::Config(format!("missing weight {name}"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::shape("load_weights", format!("{name} {:?}", var.dims()), format!("{:?}", t.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
