//! Conditioning sequence construction: grounded captions, toy text and image
//! encoders, the trainable content adaptor, and the interleaved multimodal
//! embedding with its per-object slot sets.

mod adaptor;
mod encoders;
mod multimodal;
mod tokenizer;

pub use adaptor::{Adaptor, AdaptorConfig};
pub use encoders::{HashTextEncoder, ImageEncoder, PatchProjectionEncoder, TextEncoder};
pub use multimodal::{
    build_multimodal_embedding, drop_modalities, encode_objects, ConditioningInputs, DropFlags,
    MultimodalEmbedding, ObjectTokenBlock, Provenance,
};
pub use tokenizer::{
    tokenize_with_grounding, GroundedCaption, Span, TextTokenizer, Token, TokenizedCaption,
    ToyTokenizer,
};
