use candle_core::{Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptorConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// Tokens emitted per object.
    pub num_tokens: usize,
    pub num_patches: usize,
}

/// Content adaptor: a per-patch two-layer perceptron followed by learned
/// softmax pooling of the patches into `num_tokens` tokens.
#[derive(Debug, Clone)]
pub struct Adaptor {
    fc1: Linear,
    fc2: Linear,
    pool: Tensor,
    cfg: AdaptorConfig,
}

impl Adaptor {
    pub fn new(cfg: AdaptorConfig, vb: VarBuilder) -> Result<Self> {
        let fc1 = linear(cfg.feature_dim, cfg.hidden_dim, vb.pp("fc1"))?;
        let fc2 = linear(cfg.hidden_dim, cfg.out_dim, vb.pp("fc2"))?;
        let pool = vb.get_with_hints(
            (cfg.num_tokens, cfg.num_patches),
            "pool",
            candle_nn::Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        Ok(Adaptor { fc1, fc2, pool, cfg })
    }

    pub fn config(&self) -> &AdaptorConfig {
        &self.cfg
    }

    /// `(patches, features)` to `(num_tokens, out_dim)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(features)?.silu()?;
        let h = self.fc2.forward(&h)?;
        let weights = candle_nn::ops::softmax(&self.pool, D::Minus1)?;
        Ok(weights.matmul(&h)?)
    }
}
