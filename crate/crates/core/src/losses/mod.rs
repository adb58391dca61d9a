//! Attention-supervision losses and the denoising objective.
//!
//! The tensor functions are differentiable and drive training. The
//! [`closed_form`] module evaluates the same quantities in `f64` together
//! with hand-derived gradients.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{downsample_mask, BinaryMask};

/// Per-object segmentation masks at one resolution, pairwise disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSet {
    resolution: (usize, usize),
    maps: Vec<BinaryMask>,
}

impl SegmentationSet {
    /// Builds a disjoint set: a pixel claimed by several masks stays with
    /// the earliest object and is removed from the later ones.
    pub fn new(maps: Vec<BinaryMask>) -> Result<Self> {
        let resolution = maps.first().map_or((0, 0), BinaryMask::dims);
        if let Some(m) = maps.iter().find(|m| m.dims() != resolution) {
            return Err(Error::shape(
                "SegmentationSet",
                format!("{resolution:?}"),
                format!("{:?}", m.dims()),
            ));
        }
        let mut claimed = BinaryMask::new(resolution.0, resolution.1);
        let mut out = Vec::with_capacity(maps.len());
        for m in maps {
            let own = m.difference(&claimed);
            claimed = claimed.union(&own);
            out.push(own);
        }
        Ok(SegmentationSet {
            resolution,
            maps: out,
        })
    }

    /// Max-pools full-resolution masks to `target` before enforcing
    /// disjointness.
    pub fn from_full_resolution(maps: &[BinaryMask], target: (usize, usize)) -> Result<Self> {
        let pooled = maps
            .iter()
            .map(|m| downsample_mask(m, target))
            .collect::<Result<Vec<_>>>()?;
        let mut set = Self::new(pooled)?;
        set.resolution = target;
        Ok(set)
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn num_pixels(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[BinaryMask] {
        &self.maps
    }

    /// `(N, P)` 0/1 indicator matrix.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.maps.iter().flat_map(BinaryMask::to_f32).collect();
        Ok(Tensor::from_vec(v, (self.maps.len(), self.num_pixels()), device)?.to_dtype(dtype)?)
    }
}

/// Loss weights and the resolution the mean attention maps are taken at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub canonical: (usize, usize),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1e3,
            beta: 1.0,
            canonical: (8, 8),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn uses_attention(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
}

fn check_slots(slots: &[Vec<usize>], l: usize) -> Result<()> {
    if let Some(&h) = slots.iter().flatten().find(|&&h| h >= l) {
        return Err(Error::shape("cross_attention_loss", format!("slot < {l}"), h));
    }
    Ok(())
}

/// `(L, N)` indicator of the slot sets.
fn slot_matrix(slots: &[Vec<usize>], l: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = slots.len();
    let mut v = vec![0f32; l * n];
    for (i, set) in slots.iter().enumerate() {
        for &h in set {
            v[h * n + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(v, (l, n), device)?.to_dtype(dtype)?)
}

/// Identity loss on a `(P, L)` mean cross-attention map.
///
/// For every object with a non-empty slot set, one minus the fraction of
/// its slot columns' mass that lands inside its segmentation, averaged
/// over those objects. Zero when no object has slots.
pub fn cross_attention_loss(cross_mean: &Tensor, segs: &SegmentationSet, slots: &[Vec<usize>]) -> Result<Tensor> {
    let (p, l) = cross_mean.dims2()?;
    if p != segs.num_pixels() {
        return Err(Error::shape("cross_attention_loss", segs.num_pixels(), p));
    }
    check_slots(slots, l)?;
    let (dtype, dev) = (cross_mean.dtype(), cross_mean.device());
    let active: Vec<usize> = (0..segs.len().min(slots.len()))
        .filter(|&i| !slots[i].is_empty())
        .collect();
    if active.is_empty() {
        return Ok(Tensor::zeros((), dtype, dev)?);
    }
    let act_slots: Vec<Vec<usize>> = active.iter().map(|&i| slots[i].clone()).collect();
    let act_segs = SegmentationSet {
        resolution: segs.resolution,
        maps: active.iter().map(|&i| segs.maps[i].clone()).collect(),
    };
    let h = slot_matrix(&act_slots, l, dtype, dev)?;
    let s = act_segs.to_tensor(dtype, dev)?;
    // (P, N): attention mass of each object's slot columns at each pixel.
    let col = cross_mean.matmul(&h)?;
    let total = col.sum(0)?;
    let inside = (col.t()? * &s)?.sum(D::Minus1)?;
    let totals: Vec<f64> = total.to_dtype(DType::F64)?.to_vec1()?;
    if let Some(k) = totals.iter().position(|&t| t <= 0.0) {
        return Err(Error::ZeroAttentionMass(active[k]));
    }
    let ratio = (inside / total)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Disentanglement loss on a `(P, P)` mean self-attention map.
///
/// For each object with a non-empty mask, `1 - 1/(1 + c_i)` where `c_i` is
/// the attention its pixels pay to pixels of the other objects, averaged
/// over those objects.
pub fn self_attention_loss(self_mean: &Tensor, segs: &SegmentationSet) -> Result<Tensor> {
    let (p, q) = self_mean.dims2()?;
    if p != q || p != segs.num_pixels() {
        return Err(Error::shape(
            "self_attention_loss",
            format!("{0}x{0}", segs.num_pixels()),
            format!("{p}x{q}"),
        ));
    }
    let (dtype, dev) = (self_mean.dtype(), self_mean.device());
    let present: Vec<&BinaryMask> = segs.maps.iter().filter(|m| !m.is_empty()).collect();
    if present.is_empty() {
        return Ok(Tensor::zeros((), dtype, dev)?);
    }
    let n = present.len();
    let s_vals: Vec<f32> = present.iter().flat_map(|m| m.to_f32()).collect();
    let s = Tensor::from_vec(s_vals, (n, p), dev)?.to_dtype(dtype)?;
    let union = s.sum_keepdim(0)?;
    let others = union.broadcast_sub(&s)?;
    // (N, P): attention from each object's pixels to every key pixel.
    let rows = s.matmul(self_mean)?;
    let c = (rows * others)?.sum(D::Minus1)?;
    let term = (c.affine(1.0, 1.0)?.recip()?).affine(-1.0, 1.0)?;
    Ok(term.mean_all()?)
}

/// Mean squared error between predicted and true noise.
pub fn denoising_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "denoising_loss",
            format!("{:?}", target.dims()),
            format!("{:?}", pred.dims()),
        ));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Combines already-evaluated loss terms.
pub fn total_loss(parts: (f64, f64, f64), cfg: &LossConfig) -> LossBreakdown {
    let (l_d, l_c, l_s) = parts;
    LossBreakdown {
        l_d,
        l_c,
        l_s,
        total: l_d + cfg.alpha * l_c + cfg.beta * l_s,
    }
}

/// Differentiable weighted sum of scalar loss tensors.
pub fn weighted_total(l_d: &Tensor, l_c: &Tensor, l_s: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(((l_d + (l_c * cfg.alpha)?)? + (l_s * cfg.beta)?)?)
}

/// The three losses in `f64` with gradients derived by hand. Maps are
/// row-major slices; masks are per-object pixel indicators.
pub mod closed_form {
    use crate::error::{Error, Result};

    /// Value and `dL/dA` of the identity loss on a row-major `p x l` map.
    pub fn cross_attention(a: &[f64], p: usize, l: usize, segs: &[Vec<bool>], slots: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; p * l];
        let active: Vec<usize> = (0..segs.len().min(slots.len()))
            .filter(|&i| !slots[i].is_empty())
            .collect();
        if active.is_empty() {
            return Ok((0.0, grad));
        }
        let n = active.len() as f64;
        let mut value = 0.0;
        for &i in &active {
            let (mut inside, mut total) = (0.0, 0.0);
            for x in 0..p {
                for &h in &slots[i] {
                    total += a[x * l + h];
                    if segs[i][x] {
                        inside += a[x * l + h];
                    }
                }
            }
            if total <= 0.0 {
                return Err(Error::ZeroAttentionMass(i));
            }
            value += 1.0 - inside / total;
            for x in 0..p {
                let ind = if segs[i][x] { 1.0 } else { 0.0 };
                let g = -(ind * total - inside) / (total * total) / n;
                for &h in &slots[i] {
                    grad[x * l + h] += g;
                }
            }
        }
        Ok((value / n, grad))
    }

    /// Value and `dL/dA` of the disentanglement loss on a row-major `p x p` map.
    pub fn self_attention(a: &[f64], p: usize, segs: &[Vec<bool>]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; p * p];
        let present: Vec<&Vec<bool>> = segs.iter().filter(|s| s.iter().any(|&b| b)).collect();
        if present.is_empty() {
            return (0.0, grad);
        }
        let n = present.len() as f64;
        let mut value = 0.0;
        for (i, si) in present.iter().enumerate() {
            let other = |y: usize| present.iter().enumerate().any(|(j, sj)| j != i && sj[y]);
            let mut c = 0.0;
            for x in (0..p).filter(|&x| si[x]) {
                for y in (0..p).filter(|&y| other(y)) {
                    c += a[x * p + y];
                }
            }
            value += 1.0 - 1.0 / (1.0 + c);
            let g = 1.0 / ((1.0 + c) * (1.0 + c)) / n;
            for x in (0..p).filter(|&x| si[x]) {
                for y in (0..p).filter(|&y| other(y)) {
                    grad[x * p + y] += g;
                }
            }
        }
        (value / n, grad)
    }

    /// Value and `dL/dpred` of the mean squared error.
    pub fn denoising(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let n = pred.len() as f64;
        let value = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
        (value, grad)
    }
}

#[cfg(test)]
mod properties;
