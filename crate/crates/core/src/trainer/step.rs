use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{make_training_example, spatial_conditioning, ExampleFlags, RngStreams, TrainConfig, TrainingExample, TrainingSample};
use crate::backbone::{add_noise_batch, mean_attention, CondBatch, DiffusionInput};
use crate::embedding::{ConditioningInputs, MultimodalEmbedding};
use crate::error::{Error, Result};
use crate::losses::{
    cross_attention_loss, denoising_loss, self_attention_loss, total_loss, LossBreakdown, LossConfig, SegmentationSet,
};
use crate::model::Model;

/// Counts of random outcomes within one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlagHistogram {
    pub customization: usize,
    pub text_dropped: usize,
    pub objects_dropped: usize,
    pub samples: usize,
}

impl FlagHistogram {
    fn add(&mut self, f: &ExampleFlags) {
        self.customization += f.customization as usize;
        self.text_dropped += f.text_dropped as usize;
        self.objects_dropped += f.objects_dropped as usize;
        self.samples += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub flags: FlagHistogram,
    pub examples: Vec<ExampleFlags>,
}

/// Mutable training state apart from the model weights.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub streams: RngStreams,
    pub optimizer: Adam,
    /// Current pass over the dataset and the position inside it.
    pub order: Vec<usize>,
    pub cursor: usize,
}

/// Serializable part of [`TrainState`]; optimizer moments travel as tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct StateRecord {
    pub step: usize,
    pub streams: RngStreams,
    pub optimizer_step: u64,
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            step: 0,
            streams: RngStreams::new(cfg.seed),
            optimizer: Adam::new(cfg.adam, &model.named_vars())?,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub(crate) fn record(&self) -> StateRecord {
        StateRecord {
            step: self.step,
            streams: self.streams.clone(),
            optimizer_step: self.optimizer.step,
            order: self.order.clone(),
            cursor: self.cursor,
        }
    }

    pub(crate) fn from_record(rec: StateRecord, optimizer: Adam) -> Self {
        TrainState {
            step: rec.step,
            streams: rec.streams,
            optimizer,
            order: rec.order,
            cursor: rec.cursor,
        }
    }

    /// Next `n` dataset indices, reshuffling at every pass boundary.
    pub fn next_indices(&mut self, dataset_len: usize, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor >= self.order.len() {
                self.order = (0..dataset_len).collect();
                self.order.shuffle(&mut self.streams.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub(crate) struct BatchLosses {
    pub total: Tensor,
    pub l_d: Tensor,
    pub l_c: Tensor,
    pub l_s: Tensor,
}

fn stack_inputs(examples: &[&TrainingExample]) -> Result<DiffusionInput> {
    let cat = |f: fn(&TrainingExample) -> &Tensor| -> Result<Tensor> {
        Ok(Tensor::cat(&examples.iter().map(|e| f(e)).collect::<Vec<_>>(), 0)?)
    };
    Ok(DiffusionInput {
        noisy_latent: cat(|e| &e.input.noisy_latent)?,
        layout: cat(|e| &e.input.layout)?,
        masked_background: cat(|e| &e.input.masked_background)?,
    })
}

/// Forward pass and all three losses for a micro-batch. Attention terms
/// with zero weight are evaluated for logging only.
pub(crate) fn batch_losses(model: &Model, examples: &[&TrainingExample], cfg: &LossConfig) -> Result<BatchLosses> {
    let embeddings: Vec<MultimodalEmbedding> = examples
        .iter()
        .map(|e| model.embed(&e.conditioning))
        .collect::<Result<_>>()?;
    let cond = CondBatch::from_embeddings(&embeddings.iter().collect::<Vec<_>>())?;
    let input = stack_inputs(examples)?;
    let ts: Vec<usize> = examples.iter().map(|e| e.flags.timestep).collect();
    let noise = Tensor::cat(&examples.iter().map(|e| &e.noise).collect::<Vec<_>>(), 0)?;
    let (pred, rec) = model.unet.forward(&input, &cond, &ts, None, true)?;
    let l_d = denoising_loss(&pred, &noise)?;
    let rec = rec.expect("capture requested");
    let (cross, selfm) = mean_attention(&rec, cfg.canonical)?;
    let mut lc = Vec::with_capacity(examples.len());
    let mut ls = Vec::with_capacity(examples.len());
    for (b, (ex, emb)) in examples.iter().zip(&embeddings).enumerate() {
        let segs = SegmentationSet::from_full_resolution(&ex.segmentations, cfg.canonical)?;
        lc.push(cross_attention_loss(&cross.get(b)?, &segs, &emb.slot_sets)?);
        ls.push(self_attention_loss(&selfm.get(b)?, &segs)?);
    }
    let l_c = Tensor::stack(&lc, 0)?.mean_all()?;
    let l_s = Tensor::stack(&ls, 0)?.mean_all()?;
    let mut total = l_d.clone();
    if cfg.alpha > 0.0 {
        total = (total + (&l_c * cfg.alpha)?)?;
    }
    if cfg.beta > 0.0 {
        total = (total + (&l_s * cfg.beta)?)?;
    }
    Ok(BatchLosses { total, l_d, l_c, l_s })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// One optimizer update on `batch`, split into `cfg.accumulation`
/// micro-batches whose gradients are summed with size weights.
pub fn train_step(model: &Model, state: &mut TrainState, batch: &[TrainingSample], cfg: &TrainConfig) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !batch.len().is_multiple_of(cfg.accumulation) {
        return Err(Error::Config(format!(
            "batch of {} not divisible into {} micro-batches",
            batch.len(),
            cfg.accumulation
        )));
    }
    let step = state.step + 1;
    let examples = batch
        .iter()
        .map(|s| make_training_example(model, s, cfg, &mut state.streams))
        .collect::<Result<Vec<_>>>()?;
    let vars: Vec<(String, Var)> = model.named_vars();
    let mut grads: Vec<Option<Tensor>> = vec![None; vars.len()];
    let mut parts = [0.0f64; 3];
    let micro = batch.len() / cfg.accumulation;
    for chunk in examples.chunks(micro) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let losses = batch_losses(model, &refs, &cfg.loss)?;
        let weight = chunk.len() as f64 / batch.len() as f64;
        for (k, (term, t)) in [("l_d", &losses.l_d), ("l_c", &losses.l_c), ("l_s", &losses.l_s)]
            .into_iter()
            .enumerate()
        {
            let v = scalar(t)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term,
                    step,
                });
            }
            parts[k] += weight * v;
        }
        let store = (losses.total * weight)?.backward()?;
        for ((_, var), acc) in vars.iter().zip(grads.iter_mut()) {
            if let Some(g) = store.get(var) {
                *acc = Some(match acc.take() {
                    Some(a) => (a + g)?,
                    None => g.clone(),
                });
            }
        }
    }
    state.optimizer.update(&vars, &grads, cfg.learning_rate)?;
    state.step = step;
    let mut flags = FlagHistogram::default();
    examples.iter().for_each(|e| flags.add(&e.flags));
    Ok(StepOutcome {
        losses: total_loss((parts[0], parts[1], parts[2]), &cfg.loss),
        flags,
        examples: examples.iter().map(|e| e.flags).collect(),
    })
}

/// Fixed evaluation examples: no customization, no dropout, timesteps
/// spread evenly over the schedule and noise from a dedicated seed.
#[derive(Debug, Clone)]
pub struct Probe {
    examples: Vec<TrainingExample>,
}

impl Probe {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub fn build_probe(model: &Model, samples: &[TrainingSample], seed: u64) -> Result<Probe> {
    let (dev, dtype) = (model.device(), model.dtype());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = model.schedule.steps();
    let n = samples.len().max(1);
    let examples = samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let timestep = ((2 * k + 1) * t_max) / (2 * n);
            let clean = model.codec.encode(&s.image, dev)?.to_dtype(dtype)?.unsqueeze(0)?;
            let shape = clean.dims().to_vec();
            let count: usize = shape.iter().product();
            let eps: Vec<f32> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
            let noise = Tensor::from_vec(eps, shape.as_slice(), dev)?.to_dtype(dtype)?;
            let background = model.codec.encode(&s.background, dev)?.to_dtype(dtype)?.unsqueeze(0)?;
            let (layout, masked_background) = spatial_conditioning(model, &s.layout, &background)?;
            Ok(TrainingExample {
                input: DiffusionInput {
                    noisy_latent: add_noise_batch(&clean, &[timestep], &noise, &model.schedule)?,
                    layout,
                    masked_background,
                },
                conditioning: ConditioningInputs::new(
                    s.caption.clone(),
                    s.object_images.iter().cloned().enumerate().collect(),
                ),
                segmentations: s.segmentations.clone(),
                noise,
                flags: ExampleFlags {
                    customization: false,
                    text_dropped: false,
                    objects_dropped: false,
                    timestep,
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(Probe { examples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub l_d: f64,
    pub l_c: f64,
    pub l_s: f64,
    /// Mean share of each object's slot attention that lands inside its
    /// segmentation.
    pub inside_fraction: f64,
}

/// Evaluates the probe in micro-batches of four without touching weights.
pub fn evaluate_probe(model: &Model, probe: &Probe, cfg: &LossConfig) -> Result<ProbeMetrics> {
    if probe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sums = [0.0f64; 3];
    for chunk in probe.examples.chunks(4) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let losses = batch_losses(model, &refs, cfg)?;
        let w = chunk.len() as f64;
        sums[0] += w * scalar(&losses.l_d)?;
        sums[1] += w * scalar(&losses.l_c)?;
        sums[2] += w * scalar(&losses.l_s)?;
    }
    let n = probe.len() as f64;
    Ok(ProbeMetrics {
        l_d: sums[0] / n,
        l_c: sums[1] / n,
        l_s: sums[2] / n,
        inside_fraction: 1.0 - sums[1] / n,
    })
}
