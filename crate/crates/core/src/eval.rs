//! Identity and text-alignment metrics for composited images, order
//! averaging for one-object-at-a-time baselines, and subset splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{load_training_sample, DatasetRecord};
use crate::embedding::{GroundedCaption, Span};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::{BBox, LayoutSpec};
use crate::model::Model;
use crate::sampler::{sample, SampleRequest};
use crate::synthetic::PALETTE;

/// Image embedding model. Inputs are resized to `input_size()` square with
/// aspect-preserving padding before `embed` sees them.
pub trait ImageEncoder: Send + Sync {
    fn input_size(&self) -> usize;
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Joint text/image embedding model.
pub trait TextImageEncoder: ImageEncoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub const PAD: [f32; 3] = [0.5, 0.5, 0.5];

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn prepare(enc: &dyn ImageEncoder, image: &Image) -> Image {
    let s = enc.input_size();
    if image.dims() == (s, s) {
        image.clone()
    } else {
        image.resize_padded(s, PAD)
    }
}

pub fn image_similarity(enc: &dyn ImageEncoder, a: &Image, b: &Image) -> Result<f64> {
    Ok(cosine(&enc.embed(&prepare(enc, a))?, &enc.embed(&prepare(enc, b))?))
}

pub fn text_similarity(enc: &dyn TextImageEncoder, image: &Image, text: &str) -> Result<f64> {
    Ok(cosine(&enc.embed(&prepare(enc, image))?, &enc.embed_text(text)?))
}

/// Fixed Gaussian projection of the pixels; sensitive to structure and
/// position, standing in for a self-supervised feature extractor.
#[derive(Debug, Clone)]
pub struct ProjectionEncoder {
    size: usize,
    weights: Vec<f64>,
}

impl ProjectionEncoder {
    pub fn new(size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim * 3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
        ProjectionEncoder { size, weights }
    }
}

impl ImageEncoder for ProjectionEncoder {
    fn input_size(&self) -> usize {
        self.size
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let x: Vec<f64> = image.planar().iter().map(|&v| v as f64 * 2.0 - 1.0).collect();
        if !self.weights.len().is_multiple_of(x.len()) {
            return Err(Error::shape("projection encoder", 3 * self.size * self.size, x.len()));
        }
        Ok(self
            .weights
            .chunks(x.len())
            .map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum())
            .collect())
    }
}

/// Colour-vocabulary encoder: images embed as the share of pixels nearest
/// each named palette colour, text as counts of those colour words. Pixels
/// nearer the padding gray than to any palette entry land in a last,
/// colourless bin that text never activates.
#[derive(Debug, Clone)]
pub struct PaletteEncoder {
    size: usize,
    colors: Vec<(String, [f32; 3])>,
}

impl PaletteEncoder {
    pub fn new(size: usize) -> Self {
        PaletteEncoder {
            size,
            colors: PALETTE.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
        }
    }
}

impl ImageEncoder for PaletteEncoder {
    fn input_size(&self) -> usize {
        self.size
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let k = self.colors.len();
        let mut hist = vec![0.0; k + 1];
        let dist = |a: [f32; 3], b: [f32; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f32>();
        for r in 0..image.height() {
            for c in 0..image.width() {
                let px = image.get(r, c);
                let best = self
                    .colors
                    .iter()
                    .map(|(_, rgb)| *rgb)
                    .chain(std::iter::once(PAD))
                    .enumerate()
                    .min_by(|a, b| dist(px, a.1).total_cmp(&dist(px, b.1)))
                    .map_or(k, |(i, _)| i);
                hist[best] += 1.0;
            }
        }
        let n = (image.height() * image.width()).max(1) as f64;
        Ok(hist.into_iter().map(|v| v / n).collect())
    }
}

impl TextImageEncoder for PaletteEncoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.colors.len() + 1];
        for word in text.split(|c: char| !c.is_alphanumeric()) {
            if let Some(i) = self.colors.iter().position(|(n, _)| n.eq_ignore_ascii_case(word)) {
                v[i] += 1.0;
            }
        }
        Ok(v)
    }
}

/// The encoder pair behind the six scores: `clip` for CLIP-I and both
/// CLIP-T variants, `dino` for the DINO pair.
#[derive(Clone)]
pub struct Encoders {
    pub clip: Arc<dyn TextImageEncoder>,
    pub dino: Arc<dyn ImageEncoder>,
}

impl Encoders {
    pub fn mock(seed: u64) -> Self {
        Encoders {
            clip: Arc::new(PaletteEncoder::new(16)),
            dino: Arc::new(ProjectionEncoder::new(16, 64, seed)),
        }
    }
}

impl fmt::Debug for Encoders {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Encoders").finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Action,
    Positional,
}

impl Relation {
    pub fn from_tags(tags: &[String]) -> Option<Self> {
        tags.iter().find_map(|t| match t.as_str() {
            "action" => Some(Relation::Action),
            "positional" => Some(Relation::Positional),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub generated: Image,
    pub background: Image,
    pub objects: Vec<Image>,
    pub layout: LayoutSpec,
    pub caption: GroundedCaption,
    pub relation: Option<Relation>,
}

impl EvalItem {
    /// Whether any two object boxes intersect.
    pub fn overlap(&self) -> bool {
        self.layout.has_overlap()
    }

    /// Pairs a manifest record with its generated image `<generated>/<id>.png`.
    pub fn from_record(record: &DatasetRecord, root: &Path, generated: &Path) -> Result<Self> {
        let sample = load_training_sample(record, root)?;
        Ok(EvalItem {
            id: record.id.clone(),
            generated: Image::load_png(&generated.join(format!("{}.png", record.id)))?,
            background: sample.background,
            objects: sample.object_images,
            layout: sample.layout,
            caption: sample.caption,
            relation: Relation::from_tags(&record.tags),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.objects.len() != self.layout.num_objects() {
            return Err(Error::Config(format!(
                "item {}: {} object images for {} boxes",
                self.id,
                self.objects.len(),
                self.layout.num_objects()
            )));
        }
        if self.caption.text.trim().is_empty() {
            return Err(Error::InvalidCaption(format!("item {}: empty caption", self.id)));
        }
        Ok(())
    }
}

fn crop(image: &Image, bbox: &BBox, what: &str) -> Result<Image> {
    image
        .crop(bbox)
        .ok_or_else(|| Error::DegenerateCrop(format!("{what} box {bbox:?} covers no pixel at {:?}", image.dims())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityScores {
    pub local: f64,
    pub global: f64,
}

/// Object-vs-crop and object-vs-frame similarity, averaged over objects.
pub fn identity_scores(item: &EvalItem, enc: &dyn ImageEncoder) -> Result<IdentityScores> {
    item.validate()?;
    let n = item.objects.len() as f64;
    let (mut local, mut global) = (0.0, 0.0);
    for (i, (obj, bbox)) in item.objects.iter().zip(&item.layout.object_boxes).enumerate() {
        let region = crop(&item.generated, bbox, &format!("object {i}"))?;
        local += image_similarity(enc, obj, &region)?;
        global += image_similarity(enc, obj, &item.generated)?;
    }
    Ok(IdentityScores {
        local: local / n,
        global: global / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub loc: f64,
    pub gl: f64,
}

/// Caption similarity against the inpainting-region crop and the full frame.
pub fn text_scores(item: &EvalItem, enc: &dyn TextImageEncoder) -> Result<TextScores> {
    item.validate()?;
    let region = crop(&item.generated, &item.layout.global_box, "inpainting")?;
    Ok(TextScores {
        loc: text_similarity(enc, &region, &item.caption.text)?,
        gl: text_similarity(enc, &item.generated, &item.caption.text)?,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub clip_i: f64,
    pub dino: f64,
    pub clip_i_gl: f64,
    pub dino_gl: f64,
    pub clip_t_loc: f64,
    pub clip_t_gl: f64,
}

impl Metrics {
    pub fn fields(&self) -> [f64; 6] {
        [self.clip_i, self.dino, self.clip_i_gl, self.dino_gl, self.clip_t_loc, self.clip_t_gl]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Metrics {
            clip_i: f[0],
            dino: f[1],
            clip_i_gl: f[2],
            dino_gl: f[3],
            clip_t_loc: f[4],
            clip_t_gl: f[5],
        }
    }

    /// Field-wise arithmetic mean, summed in slice order. `None` when empty.
    pub fn mean<'a>(rows: impl IntoIterator<Item = &'a Metrics>) -> Option<Metrics> {
        let mut sum = [0.0; 6];
        let mut n = 0usize;
        for m in rows {
            for (s, v) in sum.iter_mut().zip(m.fields()) {
                *s += v;
            }
            n += 1;
        }
        (n > 0).then(|| Metrics::from_fields(sum.map(|s| s / n as f64)))
    }
}

pub fn score_image(item: &EvalItem, enc: &Encoders) -> Result<Metrics> {
    let clip = identity_scores(item, enc.clip.as_ref())?;
    let dino = identity_scores(item, enc.dino.as_ref())?;
    let text = text_scores(item, enc.clip.as_ref())?;
    Ok(Metrics {
        clip_i: clip.local,
        dino: dino.local,
        clip_i_gl: clip.global,
        dino_gl: dino.global,
        clip_t_loc: text.loc,
        clip_t_gl: text.gl,
    })
}

/// Composites a single object onto a canvas.
pub trait CompositeRunner: Send + Sync {
    fn composite(&self, canvas: &Image, item: &EvalItem, object: usize) -> Result<Image>;
}

/// All insertion orders of `n` objects, lexicographic.
pub fn insertion_orders(n: usize) -> Vec<Vec<usize>> {
    (0..n).permutations(n).collect()
}

/// Mean of `eval(order)` over the given orders.
pub fn average_over_orders(
    orders: &[Vec<usize>],
    mut eval: impl FnMut(&[usize]) -> Result<Metrics>,
) -> Result<Metrics> {
    let rows = orders.iter().map(|o| eval(o)).collect::<Result<Vec<_>>>()?;
    Metrics::mean(&rows).ok_or_else(|| Error::Config("no insertion orders".into()))
}

/// Runs every insertion order through `runner`, starting from the item's
/// background, and averages the metrics of the final canvases.
pub fn sequential_average(runner: &dyn CompositeRunner, item: &EvalItem, enc: &Encoders) -> Result<Metrics> {
    item.validate()?;
    let orders = insertion_orders(item.objects.len());
    average_over_orders(&orders, |order| {
        let mut canvas = item.background.clone();
        for &i in order {
            canvas = runner.composite(&canvas, item, i)?;
        }
        score_image(
            &EvalItem {
                generated: canvas,
                ..item.clone()
            },
            enc,
        )
    })
}

/// Drives a trained model one object at a time: each call inpaints the
/// object's box inside the item's global region.
pub struct ModelRunner<'a> {
    pub model: &'a Model,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl CompositeRunner for ModelRunner<'_> {
    fn composite(&self, canvas: &Image, item: &EvalItem, object: usize) -> Result<Image> {
        let bbox = item.layout.object_boxes[object];
        let phrase = item
            .caption
            .spans
            .iter()
            .find(|s| s.object == object)
            .map(|s| item.caption.phrase(s))
            .unwrap_or_else(|| "object".into());
        let end = phrase.chars().count();
        let req = SampleRequest {
            background: canvas.clone(),
            layout: LayoutSpec::new(vec![bbox], item.layout.global_box),
            objects: vec![item.objects[object].clone()],
            caption: GroundedCaption::new(phrase, vec![Span { object: 0, start: 0, end }]),
            steps: self.steps,
            guidance: self.guidance,
            seed: self.seed.wrapping_add(object as u64),
        };
        Ok(sample(self.model, &req, false)?.image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub subset: SubsetKey,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub id: String,
    pub reason: String,
}

/// Per-item rows, their mean, per-subset means and the items left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: Vec<ItemRow>,
    pub aggregate: Option<Metrics>,
    pub subsets: BTreeMap<String, Metrics>,
    pub excluded: Vec<Excluded>,
}

impl MetricReport {
    pub fn from_rows(items: Vec<ItemRow>, excluded: Vec<Excluded>) -> Self {
        let aggregate = Metrics::mean(items.iter().map(|r| &r.metrics));
        let mut groups: BTreeMap<String, Vec<&Metrics>> = BTreeMap::new();
        for r in &items {
            groups.entry(r.subset.to_string()).or_default().push(&r.metrics);
        }
        let subsets = groups
            .into_iter()
            .filter_map(|(k, v)| Metrics::mean(v).map(|m| (k, m)))
            .collect();
        MetricReport {
            items,
            aggregate,
            subsets,
            excluded,
        }
    }
}

/// Scores items in parallel and reduces in input order. Items whose scoring
/// fails are excluded with the reason.
pub fn evaluate(items: &[EvalItem], enc: &Encoders, runner: Option<&dyn CompositeRunner>) -> MetricReport {
    let results: Vec<Result<Metrics>> = items
        .par_iter()
        .map(|item| match runner {
            Some(r) => sequential_average(r, item, enc),
            None => score_image(item, enc),
        })
        .collect();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (item, res) in items.iter().zip(results) {
        match res {
            Ok(metrics) => rows.push(ItemRow {
                id: item.id.clone(),
                subset: SubsetKey::of(item),
                metrics,
            }),
            Err(e) => {
                log::warn!("item {} excluded: {e}", item.id);
                excluded.push(Excluded {
                    id: item.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    MetricReport::from_rows(rows, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetKey {
    pub overlap: bool,
    pub relation: Option<Relation>,
}

impl SubsetKey {
    pub fn of(item: &EvalItem) -> Self {
        SubsetKey {
            overlap: item.overlap(),
            relation: item.relation,
        }
    }
}

impl fmt::Display for SubsetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let geometry = if self.overlap { "overlap" } else { "nonoverlap" };
        let relation = match self.relation {
            Some(Relation::Action) => "action",
            Some(Relation::Positional) => "positional",
            None => "untagged",
        };
        write!(f, "{geometry}/{relation}")
    }
}

/// Item ids per (geometry, relation) cell. Every item lands in exactly one
/// cell; items without a relation tag go to the `untagged` column.
pub fn split_subsets(items: &[EvalItem]) -> BTreeMap<SubsetKey, Vec<String>> {
    let mut out: BTreeMap<SubsetKey, Vec<String>> = BTreeMap::new();
    for item in items {
        out.entry(SubsetKey::of(item)).or_default().push(item.id.clone());
    }
    let untagged: usize = out.iter().filter(|(k, _)| k.relation.is_none()).map(|(_, v)| v.len()).sum();
    if untagged > 0 {
        log::info!("{untagged} items carry no relation tag");
    }
    out
}

#[cfg(test)]
mod tests;
