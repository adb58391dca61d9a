//! Inference: deterministic DDIM denoising with per-object cross-attention
//! masking, optional classifier-free guidance, and paste-back.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionRecord, CondBatch, CrossAttentionBias, DiffusionInput, NoiseSchedule};
use crate::embedding::{ConditioningInputs, GroundedCaption, MultimodalEmbedding};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::{downsample_mask, rasterize_box, validate_layout, BinaryMask, LayoutSpec};
use crate::model::Model;
use crate::trainer::spatial_conditioning;

/// Which `(pixel, position)` pairs of the cross-attention may be non-zero,
/// per attention resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskPlan {
    pub length: usize,
    /// Row-major `P x length` allow matrices.
    pub by_resolution: Vec<((usize, usize), Vec<bool>)>,
}

impl AttentionMaskPlan {
    pub fn fully_allowed(length: usize, resolutions: &[(usize, usize)]) -> Self {
        AttentionMaskPlan {
            length,
            by_resolution: resolutions.iter().map(|&(h, w)| ((h, w), vec![true; h * w * length])).collect(),
        }
    }

    pub fn matrix(&self, res: (usize, usize)) -> Option<&[bool]> {
        self.by_resolution.iter().find(|(r, _)| *r == res).map(|(_, m)| m.as_slice())
    }

    pub fn allowed(&self, res: (usize, usize), pixel: usize, position: usize) -> bool {
        self.matrix(res).is_some_and(|m| m[pixel * self.length + position])
    }

    /// Entry-wise conjunction of two plans over the same layout.
    pub fn intersect(&self, other: &AttentionMaskPlan) -> Result<AttentionMaskPlan> {
        if self.length != other.length {
            return Err(Error::shape("AttentionMaskPlan::intersect", self.length, other.length));
        }
        let by_resolution = self
            .by_resolution
            .iter()
            .map(|(res, m)| {
                let o = other
                    .matrix(*res)
                    .ok_or_else(|| Error::Config(format!("plan lacks resolution {res:?}")))?;
                Ok((*res, m.iter().zip(o).map(|(a, b)| *a && *b).collect()))
            })
            .collect::<Result<_>>()?;
        Ok(AttentionMaskPlan {
            length: self.length,
            by_resolution,
        })
    }

    /// Additive `(1, 1, P, length)` biases: `0` where allowed, `-inf` elsewhere.
    pub fn to_bias(&self, dtype: DType, device: &Device) -> Result<CrossAttentionBias> {
        let by_resolution = self
            .by_resolution
            .iter()
            .map(|((h, w), m)| {
                let v: Vec<f32> = m.iter().map(|&a| if a { 0.0 } else { f32::NEG_INFINITY }).collect();
                Ok(((*h, *w), Tensor::from_vec(v, (1, 1, *h * *w, self.length), device)?.to_dtype(dtype)?))
            })
            .collect::<Result<_>>()?;
        Ok(CrossAttentionBias { by_resolution })
    }
}

/// Object slots see only their own box, end-of-text positions see the
/// union of boxes, every other position is unrestricted. Boxes are
/// rasterized at `base` and max-pooled to each resolution. Rows left with
/// nothing allowed are reopened entirely.
pub fn build_attention_mask(
    slots: &[Vec<usize>],
    eot_positions: &[usize],
    length: usize,
    layout: &LayoutSpec,
    base: (usize, usize),
    resolutions: &[(usize, usize)],
) -> Result<AttentionMaskPlan> {
    if let Some(&p) = slots.iter().flatten().chain(eot_positions).find(|&&p| p >= length) {
        return Err(Error::shape("build_attention_mask", format!("positions < {length}"), p));
    }
    let full: Vec<BinaryMask> = layout.object_boxes.iter().map(|b| rasterize_box(b, base)).collect();
    let mut by_resolution = Vec::with_capacity(resolutions.len());
    for &res in resolutions {
        let masks = full
            .iter()
            .map(|m| downsample_mask(m, res))
            .collect::<Result<Vec<_>>>()?;
        let union = masks.iter().fold(BinaryMask::new(res.0, res.1), |acc, m| acc.union(m));
        let p = res.0 * res.1;
        let mut allow = vec![true; p * length];
        for (i, set) in slots.iter().enumerate() {
            let Some(mask) = masks.get(i) else { continue };
            for x in 0..p {
                if !mask.bits()[x] {
                    set.iter().for_each(|&h| allow[x * length + h] = false);
                }
            }
        }
        for x in 0..p {
            if !union.bits()[x] {
                eot_positions.iter().for_each(|&h| allow[x * length + h] = false);
            }
        }
        let mut reopened = 0;
        for row in allow.chunks_mut(length) {
            if !row.iter().any(|&a| a) {
                row.fill(true);
                reopened += 1;
            }
        }
        if reopened > 0 {
            // A sequence made only of slots and end-of-text (the null branch)
            // always ends up here; anything else points at a bad layout.
            let restricted = slots.iter().flatten().chain(eot_positions).collect::<std::collections::BTreeSet<_>>();
            if restricted.len() < length {
                log::warn!("attention mask at {res:?}: {reopened} pixel rows had no allowed position and were left unmasked");
            } else {
                log::debug!("attention mask at {res:?}: {reopened} rows reopened in a fully restricted sequence");
            }
        }
        by_resolution.push((res, allow));
    }
    Ok(AttentionMaskPlan { length, by_resolution })
}

/// Cross-attention mass that escaped the plan: the largest, over layers,
/// heads and objects, of the total probability slot columns place on
/// disallowed pixels; likewise for end-of-text positions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Leakage {
    pub object: f64,
    pub eot: f64,
}

pub fn attention_leakage(rec: &AttentionRecord, plan: &AttentionMaskPlan, emb: &MultimodalEmbedding) -> Result<Leakage> {
    let mut out = Leakage::default();
    for layer in &rec.layers {
        let allow = plan
            .matrix(layer.resolution)
            .ok_or_else(|| Error::Config(format!("plan lacks resolution {:?}", layer.resolution)))?;
        let probs: Vec<f64> = layer.cross.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let (b, heads, p, l) = layer.cross.dims4()?;
        for bh in 0..b * heads {
            let base = bh * p * l;
            let escaped = |cols: &[usize]| -> f64 {
                (0..p)
                    .flat_map(|x| cols.iter().map(move |&h| (x, h)))
                    .filter(|&(x, h)| !allow[x * plan.length + h])
                    .fold(0.0, |acc, (x, h)| acc + probs[base + x * l + h])
            };
            for set in &emb.slot_sets {
                out.object = out.object.max(escaped(set));
            }
            out.eot = out.eot.max(escaped(&emb.eot_positions));
        }
    }
    Ok(out)
}

/// Decreasing DDIM timesteps `(S-1)·T/S, ..., T/S, 0`.
pub fn ddim_timesteps(schedule: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let t = schedule.steps();
    let steps = steps.clamp(1, t);
    (0..steps).rev().map(|i| i * t / steps).collect()
}

/// Deterministic DDIM update from `t` to `t_prev` (`None` for the clean end).
pub fn ddim_update(schedule: &NoiseSchedule, x_t: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) => schedule.alpha_bar(tp)?,
        None => 1.0,
    };
    let x0 = ((x_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

/// Conditioning for one denoising trajectory.
pub struct StepContext<'a> {
    pub model: &'a Model,
    pub layout: &'a Tensor,
    pub masked_background: &'a Tensor,
    pub cond: &'a CondBatch,
    pub bias: Option<&'a CrossAttentionBias>,
}

/// One masked denoising step. Returns the next latent and, when requested,
/// the attention captured during the prediction.
pub fn masked_denoise_step(
    ctx: &StepContext<'_>,
    latent: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    capture: bool,
) -> Result<(Tensor, Tensor, Option<AttentionRecord>)> {
    let input = DiffusionInput {
        noisy_latent: latent.clone(),
        layout: ctx.layout.clone(),
        masked_background: ctx.masked_background.clone(),
    };
    let (eps, rec) = ctx.model.unet.forward(&input, ctx.cond, &[t], ctx.bias, capture)?;
    let next = ddim_update(&ctx.model.schedule, latent, &eps, t, t_prev)?;
    Ok((next, eps, rec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub background: Image,
    pub layout: LayoutSpec,
    pub objects: Vec<Image>,
    pub caption: GroundedCaption,
    pub steps: usize,
    /// Classifier-free guidance scale; `1.0` disables the null branch.
    pub guidance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub leakage: Leakage,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Decoded result with the background pasted back outside the
    /// inpainting region.
    pub image: Image,
    /// Decoded result before paste-back.
    pub generated: Image,
    /// Per-step leakage when tracing was requested.
    pub trace: Vec<StepTrace>,
}

struct Branch {
    emb: MultimodalEmbedding,
    cond: CondBatch,
    plan: AttentionMaskPlan,
    bias: CrossAttentionBias,
}

fn branch(model: &Model, inputs: &ConditioningInputs, layout: &LayoutSpec, base: (usize, usize)) -> Result<Branch> {
    let emb = model.embed(inputs)?;
    let cond = CondBatch::from_embeddings(&[&emb])?;
    let resolutions = model.unet.config().attention_resolutions();
    let plan = build_attention_mask(&emb.slot_sets, &emb.eot_positions, emb.len(), layout, base, &resolutions)?;
    let bias = plan.to_bias(model.dtype(), model.device())?;
    Ok(Branch { emb, cond, plan, bias })
}

/// Runs the full trajectory. With `trace`, attention is captured at every
/// step and checked against the mask plan; the null branch of guidance carries no
/// object or caption tokens and is not traced.
pub fn sample(model: &Model, req: &SampleRequest, trace: bool) -> Result<SampleOutput> {
    if req.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    validate_layout(&req.layout).map_err(|v| Error::InvalidLayout(v.to_string()))?;
    if req.objects.len() != req.layout.num_objects() {
        return Err(Error::Config(format!(
            "{} object images for {} boxes",
            req.objects.len(),
            req.layout.num_objects()
        )));
    }
    let (dev, dtype) = (model.device(), model.dtype());
    let bg_latent = model.codec.encode(&req.background, dev)?.to_dtype(dtype)?.unsqueeze(0)?;
    let bg_latent = if req.layout.customization {
        bg_latent.zeros_like()?
    } else {
        bg_latent
    };
    let (_, _, h, w) = bg_latent.dims4()?;
    let (layout_t, masked_bg) = spatial_conditioning(model, &req.layout, &bg_latent)?;

    let cond_inputs = ConditioningInputs::new(req.caption.clone(), req.objects.iter().cloned().enumerate().collect());
    let main = branch(model, &cond_inputs, &req.layout, (h, w))?;
    let null = if req.guidance != 1.0 {
        Some(branch(model, &ConditioningInputs::null(), &req.layout, (h, w))?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let n = bg_latent.elem_count();
    let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x = Tensor::from_vec(noise, bg_latent.dims(), dev)?.to_dtype(dtype)?;

    let ts = ddim_timesteps(&model.schedule, req.steps);
    let mut steps = Vec::new();
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied();
        let wrap = |e: Error| Error::SamplerStep {
            step: k,
            source: Box::new(e),
        };
        let ctx = StepContext {
            model,
            layout: &layout_t,
            masked_background: &masked_bg,
            cond: &main.cond,
            bias: Some(&main.bias),
        };
        let (next, eps_c, rec) = masked_denoise_step(&ctx, &x, t, t_prev, trace).map_err(wrap)?;
        let leak = match rec {
            Some(rec) => attention_leakage(&rec, &main.plan, &main.emb).map_err(wrap)?,
            None => Leakage::default(),
        };
        x = match &null {
            None => next,
            Some(nb) => {
                let ctx_u = StepContext {
                    cond: &nb.cond,
                    bias: Some(&nb.bias),
                    ..ctx
                };
                let (_, eps_u, _) = masked_denoise_step(&ctx_u, &x, t, t_prev, false).map_err(wrap)?;
                let eps = (&eps_u + ((eps_c - &eps_u)? * req.guidance)?).map_err(|e| wrap(e.into()))?;
                ddim_update(&model.schedule, &x, &eps, t, t_prev).map_err(wrap)?
            }
        };
        if trace {
            steps.push(StepTrace { t, leakage: leak });
        }
    }

    let generated = model.codec.decode(&x.squeeze(0)?)?;
    let image = if req.layout.customization {
        generated.clone()
    } else {
        let region = rasterize_box(&req.layout.global_box, req.background.dims());
        generated.composite_over(&req.background, &region)
    };
    Ok(SampleOutput {
        image,
        generated,
        trace: steps,
    })
}
