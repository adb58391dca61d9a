use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tokenizer::TokenizedCaption;
use crate::error::{Error, Result};
use crate::imageops::Image;

/// Frozen text encoder: token ids to an `L x D` embedding matrix.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, tokens: &TokenizedCaption, device: &Device, dtype: DType) -> Result<Tensor>;
}

/// Frozen image encoder: a square object image to `patches x features`.
pub trait ImageEncoder: Send + Sync {
    fn input_size(&self) -> usize;
    fn num_patches(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn encode(&self, image: &Image, device: &Device, dtype: DType) -> Result<Tensor>;
}

/// Embedding table whose rows are drawn from a generator seeded by the
/// token id, plus a small sinusoidal position term.
#[derive(Debug, Clone, Copy)]
pub struct HashTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashTextEncoder { dim, seed }
    }

    fn row(&self, id: u32, position: usize) -> impl Iterator<Item = f32> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let d = self.dim;
        (0..d).map(move |k| {
            let v: f32 = StandardNormal.sample(&mut rng);
            let freq = 1.0 / 100f32.powf((k / 2) as f32 * 2.0 / d as f32);
            let angle = position as f32 * freq;
            let pos = if k % 2 == 0 { angle.sin() } else { angle.cos() };
            0.5 * v + 0.1 * pos
        })
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, tokens: &TokenizedCaption, device: &Device, dtype: DType) -> Result<Tensor> {
        let data: Vec<f32> = tokens
            .token_ids
            .iter()
            .enumerate()
            .flat_map(|(p, &id)| self.row(id, p).collect::<Vec<_>>())
            .collect();
        Ok(Tensor::from_vec(data, (tokens.len(), self.dim), device)?.to_dtype(dtype)?)
    }
}

/// Splits the image into square patches and applies a fixed random
/// projection to each flattened patch.
#[derive(Debug, Clone)]
pub struct PatchProjectionEncoder {
    input_size: usize,
    patch: usize,
    feature_dim: usize,
    projection: Vec<f32>,
}

impl PatchProjectionEncoder {
    pub fn new(input_size: usize, patch: usize, feature_dim: usize, seed: u64) -> Self {
        assert!(patch > 0 && input_size.is_multiple_of(patch), "patch must divide input size");
        let rows = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (rows as f32).sqrt();
        let projection = (0..rows * feature_dim)
            .map(|_| { let v: f32 = StandardNormal.sample(&mut rng); scale * v })
            .collect();
        PatchProjectionEncoder {
            input_size,
            patch,
            feature_dim,
            projection,
        }
    }
}

impl ImageEncoder for PatchProjectionEncoder {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn num_patches(&self) -> usize {
        (self.input_size / self.patch).pow(2)
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn encode(&self, image: &Image, device: &Device, dtype: DType) -> Result<Tensor> {
        if image.dims() != (self.input_size, self.input_size) {
            return Err(Error::shape(
                "PatchProjectionEncoder",
                format!("{0}x{0}", self.input_size),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        let grid = self.input_size / self.patch;
        let rows = 3 * self.patch * self.patch;
        let mut patches = Vec::with_capacity(grid * grid * rows);
        for gy in 0..grid {
            for gx in 0..grid {
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        let px = image.get(gy * self.patch + dy, gx * self.patch + dx);
                        patches.extend(px.iter().map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
        let patches = Tensor::from_vec(patches, (grid * grid, rows), device)?;
        let proj = Tensor::from_vec(self.projection.clone(), (rows, self.feature_dim), device)?;
        Ok(patches.matmul(&proj)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{tokenize_with_grounding, GroundedCaption, ToyTokenizer};

    #[test]
    fn text_rows_depend_on_id_and_position_only() {
        let enc = HashTextEncoder::new(16, 3);
        let tok = ToyTokenizer::default();
        let a = tokenize_with_grounding(&GroundedCaption::new("red red", vec![]), &tok).unwrap();
        let e = enc.encode(&a, &Device::Cpu, DType::F32).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(e.len(), 3);
        assert_ne!(e[0], e[1]);
        let again = enc.encode(&a, &Device::Cpu, DType::F32).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn patch_encoder_shapes_and_resolution_check() {
        let enc = PatchProjectionEncoder::new(16, 4, 32, 1);
        let img = Image::filled(16, 16, [0.2, 0.4, 0.6]);
        let f = enc.encode(&img, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(f.dims(), &[16, 32]);
        assert!(enc.encode(&Image::new(8, 8), &Device::Cpu, DType::F32).is_err());
    }
}
