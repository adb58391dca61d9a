use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete forward-diffusion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScheduleRepr", try_from = "ScheduleRepr")]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_betas(r.betas)
    }
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie strictly inside (0, 1)".into()));
        }
        let alphas_cumprod = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas_cumprod,
        })
    }

    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                let f = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1e-4, 0.02, 1000).expect("valid default schedule")
    }
}

/// `sqrt(alpha_bar) * clean + sqrt(1 - alpha_bar) * eps`.
pub fn add_noise_with_alpha_bar(clean: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    Ok(((clean * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Noises `clean` to timestep `t`.
pub fn add_noise(clean: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    add_noise_with_alpha_bar(clean, eps, sched.alpha_bar(t)?)
}

/// Batched variant: `clean` and `eps` are `(B, ...)`, one timestep per item.
pub fn add_noise_batch(clean: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let b = clean.dim(0)?;
    if ts.len() != b {
        return Err(Error::shape("add_noise_batch", b, ts.len()));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, clean.rank() - 1));
    let ab: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<_>>()?;
    let sa: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
    let sb: Vec<f64> = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
    let dev = clean.device();
    let coef = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape.as_slice(), dev)?.to_dtype(clean.dtype())?)
    };
    Ok((clean.broadcast_mul(&coef(sa)?)? + eps.broadcast_mul(&coef(sb)?)?)?)
}
