use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::adaptor::Adaptor;
use super::encoders::ImageEncoder;
use super::tokenizer::{GroundedCaption, TokenizedCaption};
use crate::error::{Error, Result};
use crate::imageops::Image;

/// Adapted image tokens for one object, `K x D`.
#[derive(Debug, Clone)]
pub struct ObjectTokenBlock {
    pub object_index: usize,
    pub tokens: Tensor,
}

/// Origin of each position in the conditioning sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Text,
    Object(usize),
    Eot,
    Pad,
}

/// The interleaved conditioning sequence and its bookkeeping.
#[derive(Debug, Clone)]
pub struct MultimodalEmbedding {
    /// `L x D`.
    pub sequence: Tensor,
    /// Per object: caption-span positions followed by image-token positions.
    pub slot_sets: Vec<Vec<usize>>,
    pub eot_positions: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl MultimodalEmbedding {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Slot set of `object`; empty when the object contributes nothing.
    pub fn slots(&self, object: usize) -> &[usize] {
        self.slot_sets.get(object).map_or(&[], Vec::as_slice)
    }
}

/// Encodes each object image and adapts it into `K` conditioning tokens.
pub fn encode_objects(
    objects: &[(usize, Image)],
    encoder: &dyn ImageEncoder,
    adaptor: &Adaptor,
    device: &Device,
    dtype: DType,
) -> Result<Vec<ObjectTokenBlock>> {
    objects
        .iter()
        .map(|(index, image)| {
            let features = encoder
                .encode(image, device, dtype)
                .map_err(|e| Error::Encoder {
                    object: *index,
                    reason: e.to_string(),
                })?;
            Ok(ObjectTokenBlock {
                object_index: *index,
                tokens: adaptor.forward(&features)?,
            })
        })
        .collect()
}

/// Splices each object's block right after the last token of its caption
/// span. Without grounded spans (dropped or empty caption) the blocks follow
/// the end-of-text sentinel in object order.
pub fn build_multimodal_embedding(
    tok: &TokenizedCaption,
    text_emb: &Tensor,
    blocks: &[ObjectTokenBlock],
) -> Result<MultimodalEmbedding> {
    let (lt, d) = text_emb.dims2()?;
    if lt != tok.len() {
        return Err(Error::shape("build_multimodal_embedding", tok.len(), lt));
    }
    for b in blocks {
        let bd = b.tokens.dim(1)?;
        if bd != d {
            return Err(Error::shape("build_multimodal_embedding", format!("D={d}"), format!("D={bd}")));
        }
    }
    let grounded = !tok.span_token_ranges.is_empty();

    // (insert-after text position, block) in splice order.
    let mut inserts: Vec<(usize, &ObjectTokenBlock)> = Vec::with_capacity(blocks.len());
    for b in blocks {
        let at = if grounded {
            tok.span_for(b.object_index)
                .ok_or_else(|| {
                    Error::InvalidCaption(format!("object {} has no caption span", b.object_index))
                })?
                .end
                - 1
        } else {
            lt - 1
        };
        inserts.push((at, b));
    }
    inserts.sort_by_key(|(at, b)| (*at, b.object_index));

    let n_objects = tok
        .span_token_ranges
        .iter()
        .map(|(o, _)| o + 1)
        .chain(blocks.iter().map(|b| b.object_index + 1))
        .max()
        .unwrap_or(0);
    let mut slot_sets = vec![Vec::new(); n_objects];
    let mut provenance = Vec::new();
    let mut eot_positions = Vec::new();
    let mut pieces = Vec::new();
    let mut text_pos_map = vec![0usize; lt];
    let mut cursor = 0;

    let mut emit_text = |from: usize, to: usize, provenance: &mut Vec<Provenance>, pieces: &mut Vec<Tensor>| -> Result<()> {
        if to > from {
            pieces.push(text_emb.narrow(0, from, to - from)?);
            for (p, slot) in text_pos_map.iter_mut().enumerate().take(to).skip(from) {
                *slot = provenance.len();
                provenance.push(if tok.eot_positions.contains(&p) {
                    Provenance::Eot
                } else {
                    Provenance::Text
                });
            }
        }
        Ok(())
    };

    for (at, block) in inserts.iter() {
        emit_text(cursor, at + 1, &mut provenance, &mut pieces)?;
        cursor = cursor.max(at + 1);
        let k = block.tokens.dim(0)?;
        let start = provenance.len();
        pieces.push(block.tokens.clone());
        provenance.extend(std::iter::repeat_n(Provenance::Object(block.object_index), k));
        slot_sets[block.object_index].extend(start..start + k);
    }
    emit_text(cursor, lt, &mut provenance, &mut pieces)?;

    for (object, range) in &tok.span_token_ranges {
        let mut text_slots: Vec<usize> = range.clone().map(|p| text_pos_map[p]).collect();
        text_slots.append(&mut slot_sets[*object]);
        slot_sets[*object] = text_slots;
    }
    for &p in &tok.eot_positions {
        eot_positions.push(text_pos_map[p]);
    }
    let sequence = if pieces.len() == 1 {
        pieces.pop().expect("one piece")
    } else {
        Tensor::cat(&pieces, 0)?
    };
    Ok(MultimodalEmbedding {
        sequence,
        slot_sets,
        eot_positions,
        provenance,
    })
}

/// Which modalities were removed by [`drop_modalities`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct DropFlags {
    pub text_dropped: bool,
    pub objects_dropped: bool,
}

/// Raw conditioning before encoding: the caption and the object images.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInputs {
    pub caption: GroundedCaption,
    pub objects: Vec<(usize, Image)>,
    pub flags: DropFlags,
}

impl ConditioningInputs {
    pub fn new(caption: GroundedCaption, objects: Vec<(usize, Image)>) -> Self {
        ConditioningInputs {
            caption,
            objects,
            flags: DropFlags::default(),
        }
    }

    /// Null conditioning: empty caption, no objects.
    pub fn null() -> Self {
        ConditioningInputs {
            caption: GroundedCaption::empty(),
            objects: Vec::new(),
            flags: DropFlags {
                text_dropped: true,
                objects_dropped: true,
            },
        }
    }
}

/// Independently drops the caption and the object images, each with
/// probability `p_drop`. Two uniform draws are consumed on every call. With
/// `guard` set, a double drop keeps the objects.
pub fn drop_modalities<R: Rng + ?Sized>(
    mut inputs: ConditioningInputs,
    rng: &mut R,
    p_drop: f64,
    guard: bool,
) -> ConditioningInputs {
    assert!((0.0..=1.0).contains(&p_drop), "p_drop must be a probability");
    let drop_text = rng.random::<f64>() < p_drop;
    let mut drop_objects = rng.random::<f64>() < p_drop;
    if guard && drop_text && drop_objects {
        drop_objects = false;
    }
    if drop_text {
        inputs.caption = GroundedCaption::empty();
        inputs.flags.text_dropped = true;
    }
    if drop_objects {
        inputs.objects.clear();
        inputs.flags.objects_dropped = true;
    }
    inputs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{tokenize_with_grounding, Span, ToyTokenizer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(object_index: usize, k: usize, d: usize, fill: f32) -> ObjectTokenBlock {
        ObjectTokenBlock {
            object_index,
            tokens: Tensor::full(fill, (k, d), &Device::Cpu).unwrap(),
        }
    }

    fn tokenized(n_words: usize, spans: &[(usize, std::ops::Range<usize>)]) -> TokenizedCaption {
        TokenizedCaption {
            token_ids: (0..n_words as u32).chain([9999]).collect(),
            span_token_ranges: spans.to_vec(),
            eot_positions: vec![n_words],
        }
    }

    fn text(len: usize, d: usize) -> Tensor {
        Tensor::arange(0f32, (len * d) as f32, &Device::Cpu)
            .unwrap()
            .reshape((len, d))
            .unwrap()
    }

    #[test]
    fn lengths_and_slot_sizes() {
        let tok = tokenized(9, &[(0, 1..3), (1, 5..6)]);
        let emb = build_multimodal_embedding(&tok, &text(10, 8), &[block(0, 4, 8, 1.0), block(1, 4, 8, 2.0)]).unwrap();
        assert_eq!(emb.len(), 18);
        assert_eq!(emb.sequence.dims(), &[18, 8]);
        assert_eq!(emb.slots(0).len(), 2 + 4);
        assert_eq!(emb.slots(1).len(), 1 + 4);
    }

    #[test]
    fn zero_objects_is_identity() {
        let tok = tokenized(5, &[]);
        let t = text(6, 4);
        let emb = build_multimodal_embedding(&tok, &t, &[]).unwrap();
        assert_eq!(emb.sequence.to_vec2::<f32>().unwrap(), t.to_vec2::<f32>().unwrap());
        assert!(emb.slot_sets.is_empty());
        assert_eq!(emb.eot_positions, vec![5]);
    }

    #[test]
    fn insertion_positions_match_list_splicing() {
        // Oracle: splice labels into a plain list.
        let tok = tokenized(9, &[(0, 2..4), (1, 6..8)]);
        let mut list: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        list.splice(8..8, ["o1".to_string(), "o1".to_string()]);
        list.splice(4..4, ["o0".to_string(), "o0".to_string()]);
        let pos = |label: &str| -> Vec<usize> {
            list.iter().enumerate().filter(|(_, l)| *l == label).map(|(i, _)| i).collect()
        };

        let emb = build_multimodal_embedding(&tok, &text(10, 3), &[block(0, 2, 3, -1.0), block(1, 2, 3, -2.0)]).unwrap();
        assert_eq!(pos("o0"), vec![4, 5]);
        assert_eq!(pos("o1"), vec![10, 11]);
        assert_eq!(emb.slots(0), &[2, 3, 4, 5]);
        assert_eq!(emb.slots(1), &[8, 9, 10, 11]);
        assert_eq!(emb.eot_positions, vec![pos("t9")[0]]);
        let rows = emb.sequence.to_vec2::<f32>().unwrap();
        assert_eq!(rows[4], vec![-1.0; 3]);
        assert_eq!(rows[11], vec![-2.0; 3]);
        assert_eq!(rows[6][0], 12.0); // text token 4 shifted by two
    }

    #[test]
    fn dropped_text_appends_blocks_after_sentinel() {
        let tok = tokenize_with_grounding(&GroundedCaption::empty(), &ToyTokenizer::default()).unwrap();
        let emb = build_multimodal_embedding(&tok, &text(1, 2), &[block(1, 2, 2, 1.0), block(0, 2, 2, 0.0)]).unwrap();
        assert_eq!(emb.eot_positions, vec![0]);
        assert_eq!(emb.slots(0), &[1, 2]);
        assert_eq!(emb.slots(1), &[3, 4]);
        assert_eq!(emb.provenance[0], Provenance::Eot);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let tok = tokenized(3, &[(0, 0..1)]);
        assert!(build_multimodal_embedding(&tok, &text(4, 8), &[block(0, 2, 4, 0.0)]).is_err());
    }

    #[test]
    fn ungrounded_block_is_an_error() {
        let tok = tokenized(3, &[(0, 0..1)]);
        assert!(build_multimodal_embedding(&tok, &text(4, 2), &[block(1, 2, 2, 0.0)]).is_err());
    }

    fn inputs() -> ConditioningInputs {
        let caption = GroundedCaption::new("a cat", vec![Span { object: 0, start: 2, end: 5 }]);
        ConditioningInputs::new(caption, vec![(0, Image::new(4, 4))])
    }

    #[test]
    fn forced_double_drop() {
        // First seed whose two leading draws both fall below 0.3.
        let seed = (0u64..)
            .find(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                r.random::<f64>() < 0.3 && r.random::<f64>() < 0.3
            })
            .unwrap();
        let out = drop_modalities(inputs(), &mut ChaCha8Rng::seed_from_u64(seed), 0.3, false);
        assert!(out.flags.text_dropped && out.flags.objects_dropped);
        assert!(out.caption.text.is_empty() && out.objects.is_empty());

        let guarded = drop_modalities(inputs(), &mut ChaCha8Rng::seed_from_u64(seed), 0.3, true);
        assert!(guarded.flags.text_dropped && !guarded.flags.objects_dropped);
    }

    #[test]
    fn zero_probability_keeps_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(drop_modalities(inputs(), &mut rng, 0.0, false), inputs());
        }
    }

    #[test]
    fn text_drop_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 100_000;
        let dropped = (0..trials)
            .filter(|_| drop_modalities(inputs(), &mut rng, 0.3, false).flags.text_dropped)
            .count();
        let freq = dropped as f64 / trials as f64;
        assert!((freq - 0.3).abs() < 0.01, "{freq}");
    }
}
