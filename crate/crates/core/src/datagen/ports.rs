//! External-model ports used by the data pipeline, with offline mock
//! bindings and a JSON-over-HTTP client binding.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::{rasterize_box, BBox, BinaryMask};

/// `<subject> <relation> <object>` annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub label: String,
    pub mask: BinaryMask,
}

/// A caption substring (character offsets) linked to a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedPhrase {
    pub start: usize,
    pub end: usize,
    pub bbox: BBox,
}

/// A colored rectangle drawn onto the image before querying the outliner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outline {
    pub color: String,
    pub bbox: BBox,
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &Image, triple: &RelationTriple) -> Result<String>;
}

/// Describes two outlined entities; the reply names each one followed by
/// `within the <color> rectangle`.
pub trait Outliner: Send + Sync {
    fn describe(&self, image: &Image, outlines: &[Outline; 2], labels: [&str; 2]) -> Result<String>;
}

pub trait Grounder: Send + Sync {
    fn ground(&self, image: &Image, caption: &str) -> Result<Vec<GroundedPhrase>>;
}

pub trait Segmenter: Send + Sync {
    fn entities(&self, image: &Image) -> Result<Vec<Entity>>;
    fn mask_in_box(&self, image: &Image, bbox: &BBox) -> Result<BinaryMask>;
}

/// Similarity of two views in `[0, 1]`.
pub trait ViewScorer: Send + Sync {
    fn similarity(&self, a: &Image, b: &Image) -> Result<f64>;
}

#[derive(Clone)]
pub struct ModelPorts {
    pub captioner: Arc<dyn Captioner>,
    pub outliner: Arc<dyn Outliner>,
    pub grounder: Arc<dyn Grounder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub view_scorer: Arc<dyn ViewScorer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PortBinding {
    Mock,
    Http { endpoint: String },
}

impl ModelPorts {
    pub fn mock(hints: HintBook) -> Self {
        let hints = Arc::new(hints);
        ModelPorts {
            captioner: Arc::new(TemplateCaptioner),
            outliner: Arc::new(MockOutliner { hints: hints.clone() }),
            grounder: Arc::new(MockGrounder { hints: hints.clone() }),
            segmenter: Arc::new(MockSegmenter { hints }),
            view_scorer: Arc::new(ProjectionScorer::new(0)),
        }
    }

    pub fn http(endpoint: &str) -> Self {
        let client = Arc::new(HttpPorts::new(endpoint));
        ModelPorts {
            captioner: client.clone(),
            outliner: client.clone(),
            grounder: client.clone(),
            segmenter: client.clone(),
            view_scorer: client,
        }
    }

    pub fn from_binding(binding: &PortBinding, hints: HintBook) -> Self {
        match binding {
            PortBinding::Mock => ModelPorts::mock(hints),
            PortBinding::Http { endpoint } => ModelPorts::http(endpoint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityHint {
    pub label: String,
    pub bbox: BBox,
}

/// Side information read by the mock bindings, normally loaded from a JSON
/// file next to each input image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Hints {
    pub entities: Vec<EntityHint>,
    pub relation: Option<String>,
    pub caption: Option<String>,
}

/// Hints keyed by image content.
#[derive(Debug, Clone, Default)]
pub struct HintBook {
    entries: BTreeMap<u64, Hints>,
}

pub fn fingerprint(image: &Image) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    image.dims().hash(&mut h);
    image.to_rgb8().as_raw().hash(&mut h);
    h.finish()
}

impl HintBook {
    pub fn insert(&mut self, image: &Image, hints: Hints) {
        self.entries.insert(fingerprint(image), hints);
    }

    pub fn get(&self, image: &Image) -> Option<&Hints> {
        self.entries.get(&fingerprint(image))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn with_article(noun: &str) -> String {
    let vowel = noun.chars().next().is_some_and(|c| "aeiouAEIOU".contains(c));
    format!("{} {noun}", if vowel { "an" } else { "a" })
}

/// `a <subject> <relation> a <object>`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateCaptioner;

impl Captioner for TemplateCaptioner {
    fn caption(&self, _image: &Image, t: &RelationTriple) -> Result<String> {
        Ok(format!("{} {} {}", with_article(&t.subject), t.relation, with_article(&t.object)))
    }
}

pub struct MockOutliner {
    hints: Arc<HintBook>,
}

impl Outliner for MockOutliner {
    fn describe(&self, image: &Image, outlines: &[Outline; 2], labels: [&str; 2]) -> Result<String> {
        let relation = self
            .hints
            .get(image)
            .and_then(|h| h.relation.clone())
            .unwrap_or_else(|| "next to".into());
        Ok(format!(
            "{} within the {} rectangle {relation} {} within the {} rectangle",
            with_article(labels[0]),
            outlines[0].color,
            with_article(labels[1]),
            outlines[1].color
        ))
    }
}

/// Links each hinted label to its first unclaimed occurrence in the caption.
pub struct MockGrounder {
    hints: Arc<HintBook>,
}

impl Grounder for MockGrounder {
    fn ground(&self, image: &Image, caption: &str) -> Result<Vec<GroundedPhrase>> {
        let hints = self.hints.get(image).ok_or_else(|| Error::Port {
            port: "grounder",
            reason: "no hints for image".into(),
        })?;
        let mut claimed: Vec<(usize, usize)> = Vec::new();
        let mut out = Vec::new();
        for e in &hints.entities {
            let found = caption.match_indices(e.label.as_str()).find(|(b, _)| {
                let end = b + e.label.len();
                claimed.iter().all(|&(s, t)| end <= s || *b >= t)
            });
            if let Some((b, _)) = found {
                claimed.push((b, b + e.label.len()));
                let start = caption[..b].chars().count();
                out.push(GroundedPhrase {
                    start,
                    end: start + e.label.chars().count(),
                    bbox: e.bbox,
                });
            }
        }
        out.sort_by_key(|p| p.start);
        Ok(out)
    }
}

/// Box-shaped masks for hinted entities.
pub struct MockSegmenter {
    hints: Arc<HintBook>,
}

impl Segmenter for MockSegmenter {
    fn entities(&self, image: &Image) -> Result<Vec<Entity>> {
        let hints = self.hints.get(image).ok_or_else(|| Error::Port {
            port: "segmenter",
            reason: "no hints for image".into(),
        })?;
        Ok(hints
            .entities
            .iter()
            .map(|e| Entity {
                label: e.label.clone(),
                mask: rasterize_box(&e.bbox, image.dims()),
            })
            .collect())
    }

    fn mask_in_box(&self, image: &Image, bbox: &BBox) -> Result<BinaryMask> {
        Ok(rasterize_box(bbox, image.dims()))
    }
}

const SCORER_SIDE: usize = 16;
const SCORER_DIM: usize = 64;
const SCORER_PAD: [f32; 3] = [0.5; 3];

/// Cosine similarity of crops pushed through a fixed Gaussian projection,
/// clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ProjectionScorer {
    weights: Vec<f64>,
}

impl ProjectionScorer {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = SCORER_DIM * 3 * SCORER_SIDE * SCORER_SIDE;
        ProjectionScorer {
            weights: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        }
    }

    fn embed(&self, image: &Image) -> Vec<f64> {
        let x: Vec<f64> = image
            .resize_padded(SCORER_SIDE, SCORER_PAD)
            .planar()
            .iter()
            .map(|&v| v as f64 * 2.0 - 1.0)
            .collect();
        self.weights
            .chunks(x.len())
            .map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum())
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

impl ViewScorer for ProjectionScorer {
    fn similarity(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(cosine(&self.embed(a), &self.embed(b)).clamp(0.0, 1.0))
    }
}

/// Per-channel 8-bin histogram intersection, averaged over channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct HistogramScorer;

pub const HISTOGRAM_BINS: usize = 8;

pub fn channel_histograms(image: &Image) -> [[f64; HISTOGRAM_BINS]; 3] {
    let mut h = [[0.0; HISTOGRAM_BINS]; 3];
    let n = (image.height() * image.width()) as f64;
    for r in 0..image.height() {
        for c in 0..image.width() {
            for (k, v) in image.get(r, c).into_iter().enumerate() {
                let bin = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f32) as usize).min(HISTOGRAM_BINS - 1);
                h[k][bin] += 1.0 / n;
            }
        }
    }
    h
}

impl ViewScorer for HistogramScorer {
    fn similarity(&self, a: &Image, b: &Image) -> Result<f64> {
        let (ha, hb) = (channel_histograms(a), channel_histograms(b));
        let total: f64 = ha
            .iter()
            .zip(&hb)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p.min(*q)).sum::<f64>())
            .sum();
        Ok((total / 3.0).clamp(0.0, 1.0))
    }
}

/// Returns the same similarity for every pair.
#[derive(Debug, Clone, Copy)]
pub struct FixedScorer(pub f64);

impl ViewScorer for FixedScorer {
    fn similarity(&self, _a: &Image, _b: &Image) -> Result<f64> {
        Ok(self.0)
    }
}

/// Wire format for images: dimensions plus interleaved 8-bit RGB.
#[derive(Debug, Serialize, Deserialize)]
struct WireImage {
    height: usize,
    width: usize,
    rgb: Vec<u8>,
}

impl From<&Image> for WireImage {
    fn from(image: &Image) -> Self {
        WireImage {
            height: image.height(),
            width: image.width(),
            rgb: image.to_rgb8().into_raw(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WireMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl WireMask {
    fn into_mask(self) -> Result<BinaryMask> {
        BinaryMask::from_bits(self.height, self.width, self.bits.into_iter().map(|b| b != 0).collect())
    }
}

#[derive(Debug, Deserialize)]
struct TextReply {
    text: String,
}

#[derive(Debug, Deserialize)]
struct GroundReply {
    phrases: Vec<GroundedPhrase>,
}

#[derive(Debug, Deserialize)]
struct WireEntity {
    label: String,
    mask: WireMask,
}

#[derive(Debug, Deserialize)]
struct EntitiesReply {
    entities: Vec<WireEntity>,
}

#[derive(Debug, Deserialize)]
struct SimilarityReply {
    similarity: f64,
}

/// Client for a model server exposing one `POST` route per port.
pub struct HttpPorts {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpPorts {
    pub fn new(endpoint: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        HttpPorts {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn call<T: DeserializeOwned>(&self, port: &'static str, route: &str, body: serde_json::Value) -> Result<T> {
        let fail = |reason: String| Error::Port { port, reason };
        let url = format!("{}/{route}", self.endpoint);
        let mut resp = self.agent.post(&url).send_json(&body).map_err(|e| fail(e.to_string()))?;
        resp.body_mut().read_json::<T>().map_err(|e| fail(e.to_string()))
    }
}

impl Captioner for HttpPorts {
    fn caption(&self, image: &Image, triple: &RelationTriple) -> Result<String> {
        let body = serde_json::json!({ "image": WireImage::from(image), "triple": triple });
        Ok(self.call::<TextReply>("captioner", "caption", body)?.text)
    }
}

impl Outliner for HttpPorts {
    fn describe(&self, image: &Image, outlines: &[Outline; 2], labels: [&str; 2]) -> Result<String> {
        let drawn = super::sources::draw_outlines(image, outlines);
        let body = serde_json::json!({
            "image": WireImage::from(&drawn),
            "colors": [outlines[0].color, outlines[1].color],
            "labels": labels,
        });
        Ok(self.call::<TextReply>("outliner", "outline", body)?.text)
    }
}

impl Grounder for HttpPorts {
    fn ground(&self, image: &Image, caption: &str) -> Result<Vec<GroundedPhrase>> {
        let body = serde_json::json!({ "image": WireImage::from(image), "caption": caption });
        Ok(self.call::<GroundReply>("grounder", "ground", body)?.phrases)
    }
}

impl Segmenter for HttpPorts {
    fn entities(&self, image: &Image) -> Result<Vec<Entity>> {
        let body = serde_json::json!({ "image": WireImage::from(image) });
        self.call::<EntitiesReply>("segmenter", "segment", body)?
            .entities
            .into_iter()
            .map(|e| {
                Ok(Entity {
                    label: e.label,
                    mask: e.mask.into_mask()?,
                })
            })
            .collect()
    }

    fn mask_in_box(&self, image: &Image, bbox: &BBox) -> Result<BinaryMask> {
        let body = serde_json::json!({ "image": WireImage::from(image), "bbox": bbox });
        self.call::<WireMask>("segmenter", "segment_box", body)?.into_mask()
    }
}

impl ViewScorer for HttpPorts {
    fn similarity(&self, a: &Image, b: &Image) -> Result<f64> {
        let body = serde_json::json!({ "a": WireImage::from(a), "b": WireImage::from(b) });
        let s = self.call::<SimilarityReply>("view_scorer", "similarity", body)?.similarity;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Port {
                port: "view_scorer",
                reason: format!("similarity {s} outside [0, 1]"),
            });
        }
        Ok(s)
    }
}
