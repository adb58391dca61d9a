use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder};

use crate::error::{Error, Result};

/// Layer norm over the last axis, built from primitive ops so it stays
/// differentiable.
#[derive(Debug, Clone)]
pub(crate) struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    pub(crate) fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Norm {
            weight: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Multi-head scaled dot-product attention that returns its probabilities.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl Attention {
    pub(crate) fn new(query_dim: usize, context_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if !query_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "channel count {query_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            to_q: linear_no_bias(query_dim, query_dim, vb.pp("to_q"))?,
            to_k: linear_no_bias(context_dim, query_dim, vb.pp("to_k"))?,
            to_v: linear_no_bias(context_dim, query_dim, vb.pp("to_v"))?,
            to_out: linear(query_dim, query_dim, vb.pp("to_out"))?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x: (B, P, C)`, `context: (B, K, Dc)`, `bias` broadcastable to
    /// `(B, heads, P, K)` with `0` or `-inf` entries. Returns the output and
    /// the `(B, heads, P, K)` attention probabilities.
    pub(crate) fn forward(&self, x: &Tensor, context: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, p, c) = x.dims3()?;
        let q = self.split_heads(&self.to_q.forward(x)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let scores = match bias {
            Some(bias) => scores.broadcast_add(bias)?,
            None => scores,
        };
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, p, c))?;
        Ok((self.to_out.forward(&out)?, probs))
    }
}

/// Attention probabilities captured from one attention block.
#[derive(Debug, Clone)]
pub struct AttentionLayerMaps {
    /// Spatial resolution `(h, w)` of the query pixels.
    pub resolution: (usize, usize),
    /// `(B, heads, h*w, L)` cross-attention over the conditioning sequence.
    pub cross: Tensor,
    /// `(B, heads, h*w, h*w)` self-attention over latent pixels.
    pub self_attn: Tensor,
}

/// Every attention map from one denoising forward pass, in layer order.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub layers: Vec<AttentionLayerMaps>,
}

impl AttentionRecord {
    pub fn layer_resolutions(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.resolution).collect()
    }
}

/// `(Pc, P)` 0/1 matrix assigning each fine pixel to its coarse block.
fn block_membership(from: (usize, usize), to: (usize, usize), dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = from;
    let (hc, wc) = to;
    if hc == 0 || wc == 0 || h % hc != 0 || w % wc != 0 {
        return Err(Error::NonDivisible {
            source_dims: from,
            target: to,
        });
    }
    let (fy, fx) = (h / hc, w / wc);
    let mut m = vec![0f32; hc * wc * h * w];
    for r in 0..h {
        for c in 0..w {
            let q = (r / fy) * wc + c / fx;
            m[q * h * w + r * w + c] = 1.0;
        }
    }
    Ok(Tensor::from_vec(m, (hc * wc, h * w), device)?.to_dtype(dtype)?)
}

/// Head- and layer-averaged attention at a canonical resolution.
///
/// Query pixels are block-averaged down to `canonical`. For self-attention
/// the key axis is block-summed, so every row of both outputs remains a
/// probability distribution. Returns `(B, Pc, L)` and `(B, Pc, Pc)`.
pub fn mean_attention(rec: &AttentionRecord, canonical: (usize, usize)) -> Result<(Tensor, Tensor)> {
    if rec.layers.is_empty() {
        return Err(Error::Config("attention record is empty".into()));
    }
    let mut cross_acc: Option<Tensor> = None;
    let mut self_acc: Option<Tensor> = None;
    for layer in &rec.layers {
        let (dtype, dev) = (layer.cross.dtype(), layer.cross.device());
        let member = block_membership(layer.resolution, canonical, dtype, dev)?;
        let block = (layer.resolution.0 / canonical.0) * (layer.resolution.1 / canonical.1);
        let pool = (&member / block as f64)?;
        let cross = pool.broadcast_matmul(&layer.cross)?.mean(1)?;
        let self_q = pool.broadcast_matmul(&layer.self_attn)?;
        let self_map = self_q.broadcast_matmul(&member.t()?)?.mean(1)?;
        cross_acc = Some(match cross_acc {
            Some(a) => (a + cross)?,
            None => cross,
        });
        self_acc = Some(match self_acc {
            Some(a) => (a + self_map)?,
            None => self_map,
        });
    }
    let n = rec.layers.len() as f64;
    Ok((
        (cross_acc.expect("non-empty") / n)?,
        (self_acc.expect("non-empty") / n)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn layer(res: (usize, usize), cross: Tensor, self_attn: Tensor) -> AttentionLayerMaps {
        AttentionLayerMaps {
            resolution: res,
            cross,
            self_attn,
        }
    }

    fn uniform_self(b: usize, h: usize, p: usize) -> Tensor {
        t4(vec![1.0 / p as f64; b * h * p * p], (b, h, p, p))
    }

    #[test]
    fn single_map_is_identity() {
        let cross = t4(vec![0.1, 0.9, 0.5, 0.5, 0.3, 0.7, 1.0, 0.0], (1, 1, 4, 2));
        let rec = AttentionRecord {
            layers: vec![layer((2, 2), cross.clone(), uniform_self(1, 1, 4))],
        };
        let (c, s) = mean_attention(&rec, (2, 2)).unwrap();
        assert_eq!(c.squeeze(0).unwrap().to_vec2::<f64>().unwrap(), cross.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap());
        assert_eq!(s.dims(), &[1, 4, 4]);
    }

    #[test]
    fn heads_are_averaged() {
        let a = vec![0.2, 0.8, 0.6, 0.4];
        let b = vec![0.4, 0.6, 0.0, 1.0];
        let cross = t4([a.clone(), b.clone()].concat(), (1, 2, 2, 2));
        let rec = AttentionRecord {
            layers: vec![layer((1, 2), cross, uniform_self(1, 2, 2))],
        };
        let (c, _) = mean_attention(&rec, (1, 2)).unwrap();
        let got: Vec<f64> = c.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..4 {
            assert!((got[i] - (a[i] + b[i]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layers_reduced_to_coarse_resolution() {
        // Fine layer: 2x2 pixels, coarse layer: 1 pixel; canonical 1x1.
        let fine = t4(vec![0.1, 0.9, 0.3, 0.7, 0.5, 0.5, 0.9, 0.1], (1, 1, 4, 2));
        let coarse = t4(vec![0.6, 0.4], (1, 1, 1, 2));
        let fine_self = t4(
            vec![
                0.25, 0.25, 0.25, 0.25, 1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
            (1, 1, 4, 4),
        );
        let rec = AttentionRecord {
            layers: vec![
                layer((2, 2), fine, fine_self),
                layer((1, 1), coarse, t4(vec![1.0], (1, 1, 1, 1))),
            ],
        };
        let (c, s) = mean_attention(&rec, (1, 1)).unwrap();
        // Hand block mean of the fine layer: [(0.1+0.3+0.5+0.9)/4, (0.9+0.7+0.5+0.1)/4] = [0.45, 0.55].
        let expected = [(0.45 + 0.6) / 2.0, (0.55 + 0.4) / 2.0];
        let got: Vec<f64> = c.flatten_all().unwrap().to_vec1().unwrap();
        assert!((got[0] - expected[0]).abs() < 1e-12 && (got[1] - expected[1]).abs() < 1e-12);
        let s: Vec<f64> = s.flatten_all().unwrap().to_vec1().unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rows_stay_stochastic() {
        let dev = Device::Cpu;
        let raw = Tensor::rand(0f64, 1.0, (2, 2, 16, 5), &dev).unwrap();
        let cross = (raw.broadcast_div(&raw.sum_keepdim(3).unwrap())).unwrap();
        let sraw = Tensor::rand(0f64, 1.0, (2, 2, 16, 16), &dev).unwrap();
        let self_attn = sraw.broadcast_div(&sraw.sum_keepdim(3).unwrap()).unwrap();
        let rec = AttentionRecord {
            layers: vec![layer((4, 4), cross, self_attn)],
        };
        let (c, s) = mean_attention(&rec, (2, 2)).unwrap();
        for m in [c, s] {
            let sums: Vec<Vec<f64>> = m.sum(2).unwrap().to_vec2().unwrap();
            assert!(sums.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn incompatible_resolution() {
        let rec = AttentionRecord {
            layers: vec![layer((3, 3), t4(vec![1.0; 9], (1, 1, 9, 1)), uniform_self(1, 1, 9))],
        };
        assert!(mean_attention(&rec, (2, 2)).is_err());
    }
}
