use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::attention::{Attention, AttentionLayerMaps, AttentionRecord, Norm};
use crate::embedding::MultimodalEmbedding;
use crate::error::{Error, Result};

/// Topology of the toy denoising U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Latent channels `C`; the network consumes `2C + 1`.
    pub latent_channels: usize,
    /// Latent spatial size (square).
    pub latent_size: usize,
    /// Stride of the input stem: 2 halves the resolution before the first
    /// attention level.
    pub stem_stride: usize,
    /// Feature channels at the fine and coarse attention levels.
    pub channels: [usize; 2],
    pub heads: usize,
    /// Width `D` of the conditioning sequence.
    pub cond_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            latent_channels: 3,
            latent_size: 32,
            stem_stride: 2,
            channels: [16, 32],
            heads: 2,
            cond_dim: 64,
            time_dim: 64,
            groups: 4,
        }
    }
}

impl BackboneConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    /// Resolution of the fine and coarse attention levels.
    pub fn attention_resolutions(&self) -> [(usize, usize); 2] {
        let r = self.latent_size / self.stem_stride;
        [(r, r), (r / 2, r / 2)]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.latent_size / self.stem_stride.max(1);
        if !(self.stem_stride == 1 || self.stem_stride == 2)
            || !self.latent_size.is_multiple_of(self.stem_stride)
            || !r.is_multiple_of(2)
        {
            return Err(Error::Config(format!(
                "latent size {} incompatible with stem stride {}",
                self.latent_size, self.stem_stride
            )));
        }
        if self.channels.iter().any(|c| c % self.groups != 0 || c % self.heads != 0) {
            return Err(Error::Config("channels must divide by groups and heads".into()));
        }
        Ok(())
    }
}

/// The three spatial inputs concatenated along channels: noisy latent,
/// layout mask, masked background. All `(B, ., h, w)`.
#[derive(Debug, Clone)]
pub struct DiffusionInput {
    pub noisy_latent: Tensor,
    pub layout: Tensor,
    pub masked_background: Tensor,
}

impl DiffusionInput {
    pub fn concat(&self) -> Result<Tensor> {
        let (b, _, h, w) = self.noisy_latent.dims4()?;
        for t in [&self.layout, &self.masked_background] {
            let (tb, _, th, tw) = t.dims4()?;
            if (tb, th, tw) != (b, h, w) {
                return Err(Error::shape("DiffusionInput", format!("{b}x.x{h}x{w}"), format!("{:?}", t.dims())));
            }
        }
        Ok(Tensor::cat(
            &[&self.noisy_latent, &self.layout, &self.masked_background],
            1,
        )?)
    }
}

/// Padded batch of conditioning sequences.
#[derive(Debug, Clone)]
pub struct CondBatch {
    /// `(B, L_max, D)`.
    pub sequence: Tensor,
    /// `(B, 1, 1, L_max)`: `0` for real positions, `-inf` for padding.
    pub key_bias: Tensor,
    pub lengths: Vec<usize>,
}

impl CondBatch {
    pub fn from_embeddings(embs: &[&MultimodalEmbedding]) -> Result<Self> {
        let first = embs
            .first()
            .ok_or_else(|| Error::Config("empty conditioning batch".into()))?;
        let (dtype, device) = (first.sequence.dtype(), first.sequence.device().clone());
        let d = first.sequence.dim(1)?;
        let lmax = embs.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(embs.len());
        let mut bias = Vec::with_capacity(embs.len() * lmax);
        for e in embs {
            let l = e.len();
            let seq = if l < lmax {
                let pad = Tensor::zeros((lmax - l, d), dtype, &device)?;
                Tensor::cat(&[&e.sequence, &pad], 0)?
            } else {
                e.sequence.clone()
            };
            rows.push(seq);
            bias.extend((0..lmax).map(|j| if j < l { 0f32 } else { f32::NEG_INFINITY }));
        }
        Ok(CondBatch {
            sequence: Tensor::stack(&rows, 0)?,
            key_bias: Tensor::from_vec(bias, (embs.len(), 1, 1, lmax), &device)?.to_dtype(dtype)?,
            lengths: embs.iter().map(|e| e.len()).collect(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Additive cross-attention biases per attention resolution, each
/// `(B, 1, h*w, L_max)` holding `0` (allowed) or `-inf` (disallowed).
#[derive(Debug, Clone, Default)]
pub struct CrossAttentionBias {
    pub by_resolution: Vec<((usize, usize), Tensor)>,
}

impl CrossAttentionBias {
    fn get(&self, res: (usize, usize)) -> Option<&Tensor> {
        self.by_resolution.iter().find(|(r, _)| *r == res).map(|(_, t)| t)
    }
}

fn conv3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(conv2d(
        cin,
        cout,
        3,
        Conv2dConfig {
            padding: 1,
            stride,
            ..Default::default()
        },
        vb,
    )?)
}

fn conv1(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(conv2d(cin, cout, 1, Default::default(), vb)?)
}

/// Nearest-neighbour 2x upsampling via reshape and broadcast.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        Ok(ResBlock {
            norm1: group_norm(cfg.groups, cin, 1e-5, vb.pp("norm1"))?,
            conv1: conv3(cin, cout, 1, vb.pp("conv1"))?,
            time: linear(cfg.time_dim, cout, vb.pp("time"))?,
            norm2: group_norm(cfg.groups, cout, 1e-5, vb.pp("norm2"))?,
            conv2: conv3(cout, cout, 1, vb.pp("conv2"))?,
            skip: if cin != cout {
                Some(conv1(cin, cout, vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Self-attention over latent pixels, cross-attention over the
/// conditioning sequence, and a feed-forward layer.
#[derive(Debug, Clone)]
struct TransformerBlock {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Conv2d,
}

impl TransformerBlock {
    fn new(channels: usize, cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        Ok(TransformerBlock {
            norm: group_norm(cfg.groups, channels, 1e-5, vb.pp("norm"))?,
            proj_in: conv1(channels, channels, vb.pp("proj_in"))?,
            ln1: Norm::new(channels, vb.pp("ln1"))?,
            self_attn: Attention::new(channels, channels, cfg.heads, vb.pp("self_attn"))?,
            ln2: Norm::new(channels, vb.pp("ln2"))?,
            cross_attn: Attention::new(channels, cfg.cond_dim, cfg.heads, vb.pp("cross_attn"))?,
            ln3: Norm::new(channels, vb.pp("ln3"))?,
            ff1: linear(channels, 4 * channels, vb.pp("ff1"))?,
            ff2: linear(4 * channels, channels, vb.pp("ff2"))?,
            proj_out: conv1(channels, channels, vb.pp("proj_out"))?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        cross_bias: &Tensor,
        record: Option<&mut AttentionRecord>,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let hs = self.proj_in.forward(&self.norm.forward(x)?)?;
        let hs = hs.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let n1 = self.ln1.forward(&hs)?;
        let (sa, self_probs) = self.self_attn.forward(&n1, &n1, None)?;
        let hs = (hs + sa)?;
        let (ca, cross_probs) = self.cross_attn.forward(&self.ln2.forward(&hs)?, cond, Some(cross_bias))?;
        let hs = (hs + ca)?;
        let ff = self.ff2.forward(&self.ff1.forward(&self.ln3.forward(&hs)?)?.silu()?)?;
        let hs = (hs + ff)?;
        let hs = hs.transpose(1, 2)?.reshape((b, c, h, w))?;
        if let Some(rec) = record {
            rec.layers.push(AttentionLayerMaps {
                resolution: (h, w),
                cross: cross_probs,
                self_attn: self_probs,
            });
        }
        Ok((self.proj_out.forward(&hs)? + x)?)
    }
}

fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin() as f32);
        }
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), 2 * half), device)?.to_dtype(dtype)?)
}

/// Two-level U-Net: attention at the fine and coarse level on both the
/// down and up paths, four attention blocks in total.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: BackboneConfig,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    down0: ResBlock,
    attn_down0: TransformerBlock,
    downsample: Conv2d,
    down1: ResBlock,
    attn_down1: TransformerBlock,
    up1: ResBlock,
    attn_up1: TransformerBlock,
    upsample: Conv2d,
    up0: ResBlock,
    attn_up0: TransformerBlock,
    out_norm: GroupNorm,
    out1: Conv2d,
    out2: Conv2d,
}

impl UNet {
    pub fn new(cfg: BackboneConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1] = cfg.channels;
        let cin = cfg.input_channels();
        Ok(UNet {
            time1: linear(cfg.time_dim / 2 * 2, cfg.time_dim, vb.pp("time1"))?,
            time2: linear(cfg.time_dim, cfg.time_dim, vb.pp("time2"))?,
            stem: conv3(cin, c0, cfg.stem_stride, vb.pp("stem"))?,
            down0: ResBlock::new(c0, c0, &cfg, vb.pp("down0"))?,
            attn_down0: TransformerBlock::new(c0, &cfg, vb.pp("attn_down0"))?,
            downsample: conv3(c0, c0, 2, vb.pp("downsample"))?,
            down1: ResBlock::new(c0, c1, &cfg, vb.pp("down1"))?,
            attn_down1: TransformerBlock::new(c1, &cfg, vb.pp("attn_down1"))?,
            up1: ResBlock::new(c1, c1, &cfg, vb.pp("up1"))?,
            attn_up1: TransformerBlock::new(c1, &cfg, vb.pp("attn_up1"))?,
            upsample: conv3(c1, c0, 1, vb.pp("upsample"))?,
            up0: ResBlock::new(2 * c0, c0, &cfg, vb.pp("up0"))?,
            attn_up0: TransformerBlock::new(c0, &cfg, vb.pp("attn_up0"))?,
            out_norm: group_norm(cfg.groups, c0, 1e-5, vb.pp("out_norm"))?,
            out1: conv3(c0 + cin, c0, 1, vb.pp("out1"))?,
            out2: conv3(c0, cfg.latent_channels, 1, vb.pp("out2"))?,
            cfg,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Predicts the noise in `input.noisy_latent`. When `capture` is set the
    /// attention probabilities of every block are returned, still attached
    /// to the autodiff graph.
    pub fn forward(
        &self,
        input: &DiffusionInput,
        cond: &CondBatch,
        ts: &[usize],
        masks: Option<&CrossAttentionBias>,
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        let x_in = input.concat()?;
        let (b, cin, h, w) = x_in.dims4()?;
        if cin != self.cfg.input_channels() || h != self.cfg.latent_size || w != self.cfg.latent_size {
            return Err(Error::shape(
                "UNet::forward",
                format!("Bx{}x{1}x{1}", self.cfg.input_channels(), self.cfg.latent_size),
                format!("{b}x{cin}x{h}x{w}"),
            ));
        }
        let (cb, _, d) = cond.sequence.dims3()?;
        if cb != b || d != self.cfg.cond_dim || ts.len() != b {
            return Err(Error::shape(
                "UNet::forward",
                format!("batch {b}, D={}", self.cfg.cond_dim),
                format!("batch {cb}/{}, D={d}", ts.len()),
            ));
        }
        let (dtype, dev) = (x_in.dtype(), x_in.device().clone());
        let temb = timestep_embedding(ts, self.cfg.time_dim, dtype, &dev)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut record = capture.then(AttentionRecord::default);
        let bias_for = |hh: usize, ww: usize| -> Result<Tensor> {
            Ok(match masks.and_then(|m| m.get((hh, ww))) {
                Some(m) => m.broadcast_add(&cond.key_bias)?,
                None => cond.key_bias.clone(),
            })
        };
        let seq = &cond.sequence;

        let x = self.stem.forward(&x_in)?;
        let x = self.down0.forward(&x, &temb)?;
        let (_, _, h0, w0) = x.dims4()?;
        let skip0 = self.attn_down0.forward(&x, seq, &bias_for(h0, w0)?, record.as_mut())?;
        let x = self.downsample.forward(&skip0)?;
        let x = self.down1.forward(&x, &temb)?;
        let (_, _, h1, w1) = x.dims4()?;
        let x = self.attn_down1.forward(&x, seq, &bias_for(h1, w1)?, record.as_mut())?;
        let x = self.up1.forward(&x, &temb)?;
        let x = self.attn_up1.forward(&x, seq, &bias_for(h1, w1)?, record.as_mut())?;
        let x = self.upsample.forward(&upsample2(&x)?)?;
        let x = self.up0.forward(&Tensor::cat(&[&x, &skip0], 1)?, &temb)?;
        let x = self.attn_up0.forward(&x, seq, &bias_for(h0, w0)?, record.as_mut())?;
        let x = self.out_norm.forward(&x)?.silu()?;
        let x = if self.cfg.stem_stride == 2 { upsample2(&x)? } else { x };
        let x = self.out1.forward(&Tensor::cat(&[&x, &x_in], 1)?)?.silu()?;
        let eps = self.out2.forward(&x)?;
        Ok((eps, record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Provenance;
    use candle_nn::VarMap;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            latent_channels: 3,
            latent_size: 16,
            stem_stride: 1,
            channels: [8, 16],
            heads: 2,
            cond_dim: 16,
            time_dim: 16,
            groups: 4,
        }
    }

    fn build(cfg: BackboneConfig, dtype: DType) -> (VarMap, UNet) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, dtype, &Device::Cpu);
        let net = UNet::new(cfg, vb).unwrap();
        (vm, net)
    }

    fn cond(seq: Tensor) -> CondBatch {
        let l = seq.dim(0).unwrap();
        let emb = MultimodalEmbedding {
            sequence: seq,
            slot_sets: vec![],
            eot_positions: vec![],
            provenance: vec![Provenance::Text; l],
        };
        CondBatch::from_embeddings(&[&emb]).unwrap()
    }

    fn input(cfg: &BackboneConfig, dtype: DType) -> DiffusionInput {
        let s = cfg.latent_size;
        let c = cfg.latent_channels;
        let dev = Device::Cpu;
        DiffusionInput {
            noisy_latent: Tensor::randn(0f32, 1.0, (1, c, s, s), &dev).unwrap().to_dtype(dtype).unwrap(),
            layout: Tensor::rand(0f32, 1.0, (1, 1, s, s), &dev).unwrap().to_dtype(dtype).unwrap(),
            masked_background: Tensor::rand(-1f32, 1.0, (1, c, s, s), &dev).unwrap().to_dtype(dtype).unwrap(),
        }
    }

    #[test]
    fn shape_contract_at_full_resolution() {
        let cfg = BackboneConfig {
            latent_size: 16,
            stem_stride: 1,
            ..Default::default()
        };
        let (_vm, net) = build(cfg, DType::F32);
        let seq = Tensor::randn(0f32, 1.0, (18, cfg.cond_dim), &Device::Cpu).unwrap();
        let (eps, rec) = net.forward(&input(&cfg, DType::F32), &cond(seq), &[500], None, true).unwrap();
        assert_eq!(eps.dims(), &[1, 3, 16, 16]);
        let rec = rec.unwrap();
        assert_eq!(rec.layer_resolutions(), vec![(16, 16), (8, 8), (8, 8), (16, 16)]);
        assert_eq!(rec.layers[0].cross.dims(), &[1, 2, 256, 18]);
        let sums: Vec<f32> = rec.layers[0].cross.sum(3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn capture_is_opt_in_and_forward_is_deterministic() {
        let cfg = small_cfg();
        let (_vm, net) = build(cfg, DType::F32);
        let x = input(&cfg, DType::F32);
        let c = cond(Tensor::randn(0f32, 1.0, (6, cfg.cond_dim), &Device::Cpu).unwrap());
        let (a, rec) = net.forward(&x, &c, &[10], None, false).unwrap();
        assert!(rec.is_none());
        let (b, _) = net.forward(&x, &c, &[10], None, false).unwrap();
        let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zeroing_object_rows_changes_prediction() {
        let cfg = small_cfg();
        let (_vm, net) = build(cfg, DType::F32);
        let x = input(&cfg, DType::F32);
        let seq = Tensor::randn(0f32, 1.0, (8, cfg.cond_dim), &Device::Cpu).unwrap();
        let zeroed = Tensor::cat(
            &[
                seq.narrow(0, 0, 3).unwrap(),
                Tensor::zeros((4, cfg.cond_dim), DType::F32, &Device::Cpu).unwrap(),
                seq.narrow(0, 7, 1).unwrap(),
            ],
            0,
        )
        .unwrap();
        let (a, _) = net.forward(&x, &cond(seq), &[100], None, false).unwrap();
        let (b, _) = net.forward(&x, &cond(zeroed), &[100], None, false).unwrap();
        let delta = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(delta > 0.0);
    }

    #[test]
    fn padding_does_not_change_prediction() {
        let cfg = small_cfg();
        let (_vm, net) = build(cfg, DType::F64);
        let x = input(&cfg, DType::F64);
        let seq = Tensor::randn(0f64, 1.0, (5, cfg.cond_dim), &Device::Cpu).unwrap();
        let long = Tensor::randn(0f64, 1.0, (9, cfg.cond_dim), &Device::Cpu).unwrap();
        let emb = |s: Tensor| MultimodalEmbedding {
            provenance: vec![Provenance::Text; s.dim(0).unwrap()],
            sequence: s,
            slot_sets: vec![],
            eot_positions: vec![],
        };
        let (e1, e2) = (emb(seq.clone()), emb(long));
        let batch = CondBatch::from_embeddings(&[&e1, &e2]).unwrap();
        let xb = DiffusionInput {
            noisy_latent: Tensor::cat(&[&x.noisy_latent, &x.noisy_latent], 0).unwrap(),
            layout: Tensor::cat(&[&x.layout, &x.layout], 0).unwrap(),
            masked_background: Tensor::cat(&[&x.masked_background, &x.masked_background], 0).unwrap(),
        };
        let (single, _) = net.forward(&x, &cond(seq), &[7], None, false).unwrap();
        let (batched, _) = net.forward(&xb, &batch, &[7, 7], None, false).unwrap();
        let diff = (single - batched.narrow(0, 0, 1).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn weight_gradient_matches_finite_difference() {
        let cfg = BackboneConfig {
            latent_size: 8,
            ..small_cfg()
        };
        let (vm, net) = build(cfg, DType::F64);
        let x = input(&cfg, DType::F64);
        let c = cond(Tensor::randn(0f64, 1.0, (5, cfg.cond_dim), &Device::Cpu).unwrap());
        let target = Tensor::randn(0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let loss = |net: &UNet| -> Tensor {
            let (eps, _) = net.forward(&x, &c, &[300], None, false).unwrap();
            (eps - &target).unwrap().sqr().unwrap().mean_all().unwrap()
        };
        let grads = loss(&net).backward().unwrap();
        let data = vm.data().lock().unwrap();
        for name in ["attn_down0.cross_attn.to_k.weight", "down1.conv1.weight", "out2.weight"] {
            let var = data.get(name).unwrap();
            let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for idx in [0, base.len() / 3, base.len() - 1] {
                let h = 1e-6;
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                    loss(&net).to_scalar::<f64>().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap()).unwrap();
                let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{idx}]: autodiff {} vs fd {fd}", g[idx]);
            }
        }
    }

    #[test]
    fn masked_background_channels_can_be_disconnected() {
        let cfg = small_cfg();
        let (vm, net) = build(cfg, DType::F64);
        let c = cfg.latent_channels;
        let data = vm.data().lock().unwrap();
        // Zero the weights reading the background channels in the stem and
        // the full-resolution skip into the output head.
        for (name, offset) in [("stem.weight", 0), ("out1.weight", cfg.channels[0])] {
            let var = data.get(name).unwrap();
            let w = var.as_tensor();
            let lo = offset + c + 1;
            let dims = w.dims().to_vec();
            let keep = w.narrow(1, 0, lo).unwrap();
            let zeros = Tensor::zeros((dims[0], c, dims[2], dims[3]), DType::F64, &Device::Cpu).unwrap();
            let mut parts = vec![keep, zeros];
            if lo + c < dims[1] {
                parts.push(w.narrow(1, lo + c, dims[1] - lo - c).unwrap());
            }
            var.set(&Tensor::cat(&parts, 1).unwrap()).unwrap();
        }
        let mut x = input(&cfg, DType::F64);
        let cnd = cond(Tensor::randn(0f64, 1.0, (4, cfg.cond_dim), &Device::Cpu).unwrap());
        let (a, _) = net.forward(&x, &cnd, &[50], None, false).unwrap();
        x.masked_background = Tensor::randn(0f64, 1.0, x.masked_background.dims(), &Device::Cpu).unwrap();
        let (b, _) = net.forward(&x, &cnd, &[50], None, false).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }
}
