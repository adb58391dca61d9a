//! Joint compositing/customization training: example assembly, the
//! optimization step, and the checkpointed training loop.

mod optim;
mod run;
mod step;

pub use optim::{Adam, AdamConfig};
pub use run::{checkpoint_path, read_metrics, train_loop, MetricRow, TrainSummary, METRICS_FILE};
pub use step::{build_probe, evaluate_probe, train_step, FlagHistogram, Probe, ProbeMetrics, StepOutcome, TrainState};

use std::path::Path;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{add_noise_batch, DiffusionInput};
use crate::embedding::{drop_modalities, ConditioningInputs, GroundedCaption};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::{encode_layout, rasterize_box, validate_layout, BinaryMask, LayoutSpec};
use crate::losses::LossConfig;
use crate::model::Model;

/// One ground-truth scene with everything needed to build an example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub image: Image,
    pub background: Image,
    pub layout: LayoutSpec,
    pub object_images: Vec<Image>,
    /// Full-resolution object segmentations, one per object.
    pub segmentations: Vec<BinaryMask>,
    pub caption: GroundedCaption,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.layout.num_objects();
        if self.object_images.len() != n || self.segmentations.len() != n {
            return Err(Error::Config(format!(
                "sample {}: {n} boxes, {} object images, {} segmentations",
                self.id,
                self.object_images.len(),
                self.segmentations.len()
            )));
        }
        validate_layout(&self.layout).map_err(|v| Error::InvalidLayout(format!("sample {}: {v}", self.id)))?;
        let dims = self.image.dims();
        if self.background.dims() != dims || self.segmentations.iter().any(|m| m.dims() != dims) {
            return Err(Error::shape(
                "TrainingSample",
                format!("{dims:?} rasters"),
                format!("sample {}", self.id),
            ));
        }
        self.caption.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Samples per optimizer update, split evenly across accumulation steps.
    pub batch_size: usize,
    pub accumulation: usize,
    pub steps: usize,
    pub p_drop: f64,
    pub drop_guard: bool,
    pub p_customization: f64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Checkpoint period in steps; the final step is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            accumulation: 1,
            steps: 1000,
            p_drop: 0.3,
            drop_guard: false,
            p_customization: 0.5,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !prob(self.p_drop) || !prob(self.p_customization) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("steps, batch_size and accumulation must be positive".into()));
        }
        if !self.batch_size.is_multiple_of(self.accumulation) {
            return Err(Error::Config(format!(
                "batch_size {} not divisible by accumulation {}",
                self.batch_size, self.accumulation
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.loss.validate()
    }

    /// Reads TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Independent random streams, one per concern, all derived from the
/// master seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStreams {
    pub customization: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub timestep: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub order: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        RngStreams {
            customization: stream(1),
            dropout: stream(2),
            timestep: stream(3),
            noise: stream(4),
            order: stream(5),
        }
    }
}

/// Every random outcome behind one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleFlags {
    pub customization: bool,
    pub text_dropped: bool,
    pub objects_dropped: bool,
    pub timestep: usize,
}

/// A fully assembled single-sample example (batch dimension 1).
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: DiffusionInput,
    pub conditioning: ConditioningInputs,
    /// Full-resolution segmentations in object order.
    pub segmentations: Vec<BinaryMask>,
    pub noise: Tensor,
    pub flags: ExampleFlags,
}

/// Latent-space conditioning tensors for a clean image: the layout channel
/// and the background with the inpainting region zeroed.
pub fn spatial_conditioning(model: &Model, layout: &LayoutSpec, background: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = background.dims4()?;
    let (dev, dtype) = (model.device(), model.dtype());
    let mask = encode_layout(layout, (h, w))?;
    let layout_t = Tensor::from_vec(mask.values, (1, 1, h, w), dev)?.to_dtype(dtype)?;
    let keep: Vec<f32> = rasterize_box(&layout.global_box, (h, w))
        .complement()
        .to_f32();
    let keep = Tensor::from_vec(keep, (1, 1, h, w), dev)?.to_dtype(dtype)?;
    Ok((layout_t, background.broadcast_mul(&keep)?))
}

/// The customization switch followed by modality dropout, each from its
/// own stream.
pub fn draw_switches(inputs: ConditioningInputs, cfg: &TrainConfig, rng: &mut RngStreams) -> (bool, ConditioningInputs) {
    let customization = rng.customization.random::<f64>() < cfg.p_customization;
    let conditioning = drop_modalities(inputs, &mut rng.dropout, cfg.p_drop, cfg.drop_guard);
    (customization, conditioning)
}

/// Applies the customization switch, modality dropout, and draws the
/// timestep and noise for one sample.
pub fn make_training_example(
    model: &Model,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    rng: &mut RngStreams,
) -> Result<TrainingExample> {
    let (dev, dtype) = (model.device(), model.dtype());
    let inputs = ConditioningInputs::new(
        sample.caption.clone(),
        sample.object_images.iter().cloned().enumerate().collect(),
    );
    let (customization, conditioning) = draw_switches(inputs, cfg, rng);
    let timestep = rng.timestep.random_range(0..model.schedule.steps());

    let clean = model.codec.encode(&sample.image, dev)?.to_dtype(dtype)?.unsqueeze(0)?;
    let shape = clean.dims().to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<f32> = (0..n).map(|_| rng.noise.sample(StandardNormal)).collect();
    let noise = Tensor::from_vec(eps, shape.as_slice(), dev)?.to_dtype(dtype)?;
    let noisy = add_noise_batch(&clean, &[timestep], &noise, &model.schedule)?;

    let (layout, background) = if customization {
        (sample.layout.clone().into_customization(), clean.zeros_like()?)
    } else {
        (
            sample.layout.clone(),
            model.codec.encode(&sample.background, dev)?.to_dtype(dtype)?.unsqueeze(0)?,
        )
    };
    let (layout_t, masked_background) = spatial_conditioning(model, &layout, &background)?;
    Ok(TrainingExample {
        input: DiffusionInput {
            noisy_latent: noisy,
            layout: layout_t,
            masked_background,
        },
        flags: ExampleFlags {
            customization,
            text_dropped: conditioning.flags.text_dropped,
            objects_dropped: conditioning.flags.objects_dropped,
            timestep,
        },
        conditioning,
        segmentations: sample.segmentations.clone(),
        noise,
    })
}
