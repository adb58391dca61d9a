use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per variable in the order
/// the variables are passed, so they can be checkpointed by name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, vars: &[(String, Var)]) -> Result<Self> {
        let moments = vars
            .iter()
            .map(|(_, v)| Ok((v.zeros_like()?, v.zeros_like()?)))
            .collect::<Result<_>>()?;
        Ok(Adam { cfg, step: 0, moments })
    }

    /// One update. Variables without a gradient keep their value but still
    /// decay their moments.
    pub fn update(&mut self, vars: &[(String, Var)], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if vars.len() != self.moments.len() || grads.len() != vars.len() {
            return Err(Error::shape("Adam::update", self.moments.len(), vars.len()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, var), grad), (m, v)) in vars.iter().zip(grads).zip(self.moments.iter_mut()) {
            let g = match grad {
                Some(g) => g.detach(),
                None => var.zeros_like()?,
            };
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (delta * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors named `<prefix>m.<var>` and `<prefix>v.<var>`.
    pub fn named_moments(&self, vars: &[(String, Var)], prefix: &str) -> Vec<(String, Tensor)> {
        vars.iter()
            .zip(&self.moments)
            .flat_map(|((name, _), (m, v))| {
                [
                    (format!("{prefix}m.{name}"), m.clone()),
                    (format!("{prefix}v.{name}"), v.clone()),
                ]
            })
            .collect()
    }

    /// Restores moments saved by [`Adam::named_moments`].
    pub fn restore(
        cfg: AdamConfig,
        step: u64,
        vars: &[(String, Var)],
        tensors: &[(String, Tensor)],
        prefix: &str,
    ) -> Result<Self> {
        let find = |key: String| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer entry {key}")))
        };
        let moments = vars
            .iter()
            .map(|(name, var)| {
                let m = find(format!("{prefix}m.{name}"))?.to_dtype(var.dtype())?;
                let v = find(format!("{prefix}v.{name}"))?.to_dtype(var.dtype())?;
                Ok((m, v))
            })
            .collect::<Result<_>>()?;
        Ok(Adam { cfg, step, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matches_scalar_reference() {
        let var = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let vars = vec![("w".to_string(), var.clone())];
        let mut adam = Adam::new(AdamConfig::default(), &vars).unwrap();
        let (mut m, mut v, mut p) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, -2.0]);
        let grads = [[0.5, -1.0], [0.25, 0.75], [-0.1, 0.2]];
        for (k, g) in grads.iter().enumerate() {
            let gt = Tensor::new(&g[..], &Device::Cpu).unwrap();
            adam.update(&vars, &[Some(gt)], 0.01).unwrap();
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(k as i32 + 1));
                let vh = v[i] / (1.0 - 0.999f64.powi(k as i32 + 1));
                p[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got: Vec<f64> = var.to_vec1().unwrap();
        for i in 0..2 {
            assert!((got[i] - p[i]).abs() < 1e-12);
        }
    }
}
