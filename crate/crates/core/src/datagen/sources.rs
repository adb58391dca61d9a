//! Source adapters that turn raw inputs into dataset records.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filters::{
    check_view_consistency, filter_object_candidates, AuditEntry, Candidate, Check, FilterRules, RejectReason,
};
use super::ports::{ModelPorts, Outline, RelationTriple};
use super::record::{AssetStore, BackgroundSpec, DatasetRecord, DerivationRule, ObjectEntry, SourceTag};
use crate::embedding::{GroundedCaption, Span};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::{BBox, BinaryMask, LayoutSpec};

/// Outline colors in object order.
pub const OUTLINE_COLORS: [(&str, [f32; 3]); 2] = [("orange", [1.0, 0.55, 0.0]), ("blue", [0.0, 0.3, 1.0])];

const ACTION_WORDS: [&str; 16] = [
    "chasing", "pushing", "leaning on", "holding", "holds", "riding", "rides", "carrying", "carries", "eating",
    "playing", "kicking", "hugging", "feeding", "throwing", "chases",
];
const POSITIONAL_WORDS: [&str; 9] = [
    "left of", "right of", "above", "below", "next to", "behind", "in front of", "beside", "under",
];

/// `"action"` or `"positional"` from the relation wording, if recognizable.
pub fn relation_tag(caption: &str) -> Option<&'static str> {
    let text = caption.to_lowercase();
    let has = |w: &&str| {
        text.match_indices(*w).any(|(b, _)| {
            let before = text[..b].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let after = text[b + w.len()..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            before && after
        })
    };
    if ACTION_WORDS.iter().any(has) {
        Some("action")
    } else if POSITIONAL_WORDS.iter().any(has) {
        Some("positional")
    } else {
        None
    }
}

/// Draws one-pixel rectangle borders in each outline's color.
pub fn draw_outlines(image: &Image, outlines: &[Outline; 2]) -> Image {
    let mut out = image.clone();
    let (h, w) = image.dims();
    for o in outlines {
        let rgb = OUTLINE_COLORS
            .iter()
            .find(|(name, _)| *name == o.color)
            .map(|(_, rgb)| *rgb)
            .unwrap_or([1.0, 0.0, 0.0]);
        let c0 = ((o.bbox.x0 * w as f64).floor() as usize).min(w - 1);
        let r0 = ((o.bbox.y0 * h as f64).floor() as usize).min(h - 1);
        let c1 = ((o.bbox.x1 * w as f64).ceil() as usize).clamp(c0 + 1, w) - 1;
        let r1 = ((o.bbox.y1 * h as f64).ceil() as usize).clamp(r0 + 1, h) - 1;
        for c in c0..=c1 {
            out.set(r0, c, rgb);
            out.set(r1, c, rgb);
        }
        for r in r0..=r1 {
            out.set(r, c0, rgb);
            out.set(r, c1, rgb);
        }
    }
    out
}

fn marker(color: &str) -> String {
    format!(" within the {color} rectangle")
}

/// Byte range of the phrase naming an outlined entity: the word before the
/// marker, plus one modifier when a lowercase article precedes it.
fn phrase_before(text: &str, end: usize) -> Option<(usize, usize)> {
    let words: Vec<(usize, &str)> = text[..end]
        .split_whitespace()
        .map(|w| (w.as_ptr() as usize - text.as_ptr() as usize, w))
        .collect();
    let &(start, _) = words.last()?;
    let n = words.len();
    if n >= 3 && matches!(words[n - 3].1, "a" | "an" | "the") {
        return Some((words[n - 2].0, end));
    }
    Some((start, end))
}

/// Removes the `within the <color> rectangle` phrases from a description
/// and grounds the words they followed. Object `k` is the one outlined in
/// `colors[k]`.
pub fn strip_outline_phrases(text: &str, colors: [&str; 2]) -> Result<GroundedCaption> {
    let mut cuts = Vec::with_capacity(2);
    let mut phrases = Vec::with_capacity(2);
    for (object, color) in colors.iter().enumerate() {
        let m = marker(color);
        let at = text
            .find(&m)
            .ok_or_else(|| Error::InvalidCaption(format!("no {color} outline phrase in {text:?}")))?;
        let (s, e) = phrase_before(text, at)
            .ok_or_else(|| Error::InvalidCaption(format!("nothing precedes the {color} outline phrase")))?;
        cuts.push((at, at + m.len()));
        phrases.push((object, s, e));
    }
    cuts.sort_unstable();
    if phrases
        .iter()
        .any(|&(_, s, e)| cuts.iter().any(|&(cs, ce)| s < ce && cs < e))
    {
        return Err(Error::InvalidCaption(format!("outline phrases leave an entity unnamed in {text:?}")));
    }
    let shift = |b: usize| -> usize { cuts.iter().filter(|&&(_, ce)| ce <= b).map(|&(cs, ce)| ce - cs).sum() };
    let mut stripped = String::with_capacity(text.len());
    let mut from = 0;
    for &(cs, ce) in &cuts {
        stripped.push_str(&text[from..cs]);
        from = ce;
    }
    stripped.push_str(&text[from..]);
    let to_chars = |b: usize| stripped[..b].chars().count();
    let spans = phrases
        .into_iter()
        .map(|(object, s, e)| Span {
            object,
            start: to_chars(s - shift(s)),
            end: to_chars(e - shift(e)),
        })
        .collect();
    let caption = GroundedCaption::new(stripped, spans);
    caption.validate()?;
    Ok(caption)
}

pub struct BuildContext<'a> {
    pub ports: &'a ModelPorts,
    pub rules: &'a FilterRules,
    pub store: &'a AssetStore,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BuildOutcome {
    Record(Box<DatasetRecord>),
    Skipped { id: String, audit: Vec<AuditEntry> },
}

impl BuildOutcome {
    pub fn record(&self) -> Option<&DatasetRecord> {
        match self {
            BuildOutcome::Record(r) => Some(r),
            BuildOutcome::Skipped { .. } => None,
        }
    }

    /// Reasons of the failed audit entries.
    pub fn reasons(&self) -> Vec<RejectReason> {
        let audit = match self {
            BuildOutcome::Record(r) => &r.audit,
            BuildOutcome::Skipped { audit, .. } => audit,
        };
        audit.iter().filter_map(|a| a.reason).collect()
    }
}

struct Part {
    label: String,
    mask: BinaryMask,
    alternate: Option<Image>,
}

fn skipped(id: &str, mut audit: Vec<AuditEntry>, entry: AuditEntry) -> BuildOutcome {
    audit.push(entry);
    BuildOutcome::Skipped {
        id: id.to_string(),
        audit,
    }
}

fn port_failure(e: Error) -> AuditEntry {
    AuditEntry::fail(Check::Port, None, RejectReason::PortFailure).with_detail(e.to_string())
}

fn asset_dir(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    id: &str,
    source: SourceTag,
    image: &Image,
    parts: Vec<Part>,
    caption: GroundedCaption,
    audit: Vec<AuditEntry>,
    frame: Option<usize>,
    store: &AssetStore,
) -> Result<DatasetRecord> {
    let dir = format!("assets/{}", asset_dir(id));
    let (h, w) = image.dims();
    let mut objects = Vec::with_capacity(parts.len());
    for (k, part) in parts.iter().enumerate() {
        let bbox = part
            .mask
            .bounding_box()
            .ok_or_else(|| Error::InvalidLayout(format!("record {id}: object {k} has an empty mask")))?;
        let crop = image.crop(&bbox).expect("box of a non-empty mask");
        objects.push(ObjectEntry {
            label: part.label.clone(),
            image: store.put_image(&format!("{dir}/object{k}.png"), &crop)?,
            bbox,
            segmentation: store.put_mask(&format!("{dir}/object{k}_mask.png"), &part.mask)?,
            alternate_view: part
                .alternate
                .as_ref()
                .map(|v| store.put_image(&format!("{dir}/object{k}_view.png"), v))
                .transpose()?,
        });
    }
    let layout = LayoutSpec::enclosing(objects.iter().map(|o| o.bbox).collect(), 1.0 / h.max(w) as f64);
    let record = DatasetRecord {
        id: id.to_string(),
        source,
        ground_truth: store.put_image(&format!("{dir}/ground_truth.png"), image)?,
        background: BackgroundSpec::Derived(DerivationRule::GroundTruthMasked),
        objects,
        global: layout.global_box,
        tags: relation_tag(&caption.text).map(String::from).into_iter().collect(),
        caption,
        frame,
        audit,
        extra: Default::default(),
    };
    record.validate()?;
    Ok(record)
}

fn outlines_for(boxes: [BBox; 2]) -> [Outline; 2] {
    [0, 1].map(|k| Outline {
        color: OUTLINE_COLORS[k].0.to_string(),
        bbox: boxes[k],
    })
}

fn pick_two(accepted: &[usize], rng: &mut ChaCha8Rng) -> [usize; 2] {
    let chosen: Vec<usize> = accepted.choose_multiple(rng, 2).copied().collect();
    [chosen[0], chosen[1]]
}

fn entity_count(audit: &mut Vec<AuditEntry>, accepted: usize) -> Option<AuditEntry> {
    if accepted < 2 {
        return Some(
            AuditEntry::fail(Check::EntityCount, None, RejectReason::InsufficientEntities)
                .with_detail(format!("{accepted} entities passed the filters")),
        );
    }
    audit.push(AuditEntry::pass(Check::EntityCount, None));
    None
}

/// Segments the image, keeps two filtered entities, and asks the outliner
/// to describe them.
pub fn build_topdown_record(id: &str, image: &Image, ctx: &BuildContext<'_>, rng: &mut ChaCha8Rng) -> Result<BuildOutcome> {
    let entities = match ctx.ports.segmenter.entities(image) {
        Ok(e) => e,
        Err(e) => return Ok(skipped(id, Vec::new(), port_failure(e))),
    };
    let candidates: Vec<Candidate> = entities
        .into_iter()
        .map(|e| Candidate {
            label: e.label,
            mask: e.mask,
        })
        .collect();
    let filtered = filter_object_candidates(&candidates, ctx.rules, image.dims());
    let mut audit = filtered.audit;
    if let Some(fail) = entity_count(&mut audit, filtered.accepted.len()) {
        return Ok(skipped(id, audit, fail));
    }
    let pick = pick_two(&filtered.accepted, rng);
    let boxes = pick.map(|i| candidates[i].mask.bounding_box().expect("area-filtered mask"));
    let outlines = outlines_for(boxes);
    let labels = pick.map(|i| candidates[i].label.as_str());
    let text = match ctx.ports.outliner.describe(image, &outlines, labels) {
        Ok(t) => t,
        Err(e) => return Ok(skipped(id, audit, port_failure(e))),
    };
    let caption = match strip_outline_phrases(&text, [OUTLINE_COLORS[0].0, OUTLINE_COLORS[1].0]) {
        Ok(c) => c,
        Err(e) => {
            let fail = AuditEntry::fail(Check::Caption, None, RejectReason::UngroundedCaption).with_detail(e.to_string());
            return Ok(skipped(id, audit, fail));
        }
    };
    audit.push(AuditEntry::pass(Check::Caption, None));
    let parts = pick
        .iter()
        .map(|&i| Part {
            label: candidates[i].label.clone(),
            mask: candidates[i].mask.clone(),
            alternate: None,
        })
        .collect();
    assemble(id, SourceTag::Topdown, image, parts, caption, audit, None, ctx.store).map(|r| BuildOutcome::Record(Box::new(r)))
}

/// Grounds words of an existing caption to boxes, keeps two filtered
/// links, and segments inside their boxes.
pub fn build_bottomup_record(
    id: &str,
    image: &Image,
    caption: &str,
    ctx: &BuildContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<BuildOutcome> {
    if caption.trim().is_empty() {
        return Err(Error::InvalidCaption(format!("record {id}: empty caption")));
    }
    let links = match ctx.ports.grounder.ground(image, caption) {
        Ok(l) => l,
        Err(e) => return Ok(skipped(id, Vec::new(), port_failure(e))),
    };
    let chars: Vec<char> = caption.chars().collect();
    let candidates: Vec<Candidate> = links
        .iter()
        .map(|l| Candidate {
            label: chars[l.start.min(chars.len())..l.end.min(chars.len())].iter().collect(),
            mask: crate::layout::rasterize_box(&l.bbox, image.dims()),
        })
        .collect();
    let filtered = filter_object_candidates(&candidates, ctx.rules, image.dims());
    let mut audit = filtered.audit;
    if let Some(fail) = entity_count(&mut audit, filtered.accepted.len()) {
        return Ok(skipped(id, audit, fail));
    }
    let pick = pick_two(&filtered.accepted, rng);
    let mut parts = Vec::with_capacity(2);
    for &i in &pick {
        match ctx.ports.segmenter.mask_in_box(image, &links[i].bbox) {
            Ok(mask) if !mask.is_empty() => parts.push(Part {
                label: candidates[i].label.clone(),
                mask,
                alternate: None,
            }),
            Ok(_) => return Ok(skipped(id, audit, AuditEntry::fail(Check::Area, Some(i), RejectReason::TooSmall))),
            Err(e) => return Ok(skipped(id, audit, port_failure(e))),
        }
    }
    let spans = pick
        .iter()
        .enumerate()
        .map(|(object, &i)| Span {
            object,
            start: links[i].start,
            end: links[i].end,
        })
        .collect();
    let grounded = GroundedCaption::new(caption, spans);
    if let Err(e) = grounded.validate() {
        let fail = AuditEntry::fail(Check::Caption, None, RejectReason::UngroundedCaption).with_detail(e.to_string());
        return Ok(skipped(id, audit, fail));
    }
    audit.push(AuditEntry::pass(Check::Caption, None));
    assemble(id, SourceTag::Bottomup, image, parts, grounded, audit, None, ctx.store).map(|r| BuildOutcome::Record(Box::new(r)))
}

/// Per-frame boxes for the subject and object of a relation triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub triple: RelationTriple,
    pub boxes: Vec<[Option<BBox>; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Image>,
    pub annotation: ClipAnnotation,
}

/// Uniform choice among frames where both entities are annotated.
pub fn choose_ground_truth_frame(annotation: &ClipAnnotation, rng: &mut ChaCha8Rng) -> Option<usize> {
    let both: Vec<usize> = (0..annotation.boxes.len())
        .filter(|&f| annotation.boxes[f].iter().all(Option::is_some))
        .collect();
    if both.is_empty() {
        return None;
    }
    Some(both[rng.random_range(0..both.len())])
}

/// First alternate frame (in shuffled order) whose crop of entity `j` is
/// consistent with the ground-truth crop.
fn find_alternate(
    clip: &VideoClip,
    gt: usize,
    j: usize,
    ctx: &BuildContext<'_>,
    rng: &mut ChaCha8Rng,
    audit: &mut Vec<AuditEntry>,
) -> Result<Option<Image>> {
    let gt_box = clip.annotation.boxes[gt][j].expect("ground-truth frame has both boxes");
    let Some(reference) = clip.frames[gt].crop(&gt_box) else {
        return Ok(None);
    };
    let mut others: Vec<usize> = (0..clip.frames.len())
        .filter(|&f| f != gt && clip.annotation.boxes[f][j].is_some())
        .collect();
    others.shuffle(rng);
    for f in others {
        let Some(view) = clip.frames[f].crop(&clip.annotation.boxes[f][j].unwrap()) else {
            continue;
        };
        let check = check_view_consistency(&reference, &view, ctx.ports.view_scorer.as_ref(), ctx.rules)?;
        let detail = format!("frame {f} similarity {:.4}", check.similarity);
        if check.passed {
            audit.push(AuditEntry::pass(Check::ViewConsistency, Some(j)).with_detail(detail));
            return Ok(Some(view));
        }
        audit.push(AuditEntry::fail(Check::ViewConsistency, Some(j), RejectReason::ViewInconsistent).with_detail(detail));
    }
    Ok(None)
}

/// Picks a ground-truth frame, finds a consistent alternate view of each
/// entity, and captions the relation triple.
pub fn build_video_record(clip: &VideoClip, ctx: &BuildContext<'_>, rng: &mut ChaCha8Rng) -> Result<BuildOutcome> {
    let id = clip.id.as_str();
    if clip.annotation.boxes.len() != clip.frames.len() {
        return Err(Error::Config(format!(
            "clip {id}: {} frames but {} box rows",
            clip.frames.len(),
            clip.annotation.boxes.len()
        )));
    }
    let mut audit = Vec::new();
    let Some(gt) = choose_ground_truth_frame(&clip.annotation, rng) else {
        let fail = AuditEntry::fail(Check::EntityCount, None, RejectReason::InsufficientEntities)
            .with_detail("no frame shows both entities");
        return Ok(skipped(id, audit, fail));
    };
    let image = &clip.frames[gt];
    let triple = &clip.annotation.triple;
    let labels = [triple.subject.clone(), triple.object.clone()];
    let mut candidates = Vec::with_capacity(2);
    for (j, label) in labels.iter().enumerate() {
        let bbox = clip.annotation.boxes[gt][j].expect("both boxes present");
        match ctx.ports.segmenter.mask_in_box(image, &bbox) {
            Ok(mask) => candidates.push(Candidate {
                label: label.clone(),
                mask,
            }),
            Err(e) => return Ok(skipped(id, audit, port_failure(e))),
        }
    }
    let filtered = filter_object_candidates(&candidates, ctx.rules, image.dims());
    audit.extend(filtered.audit);
    if let Some(&(i, reason)) = filtered.rejected.first() {
        return Ok(skipped(id, audit, AuditEntry::fail(Check::EntityCount, Some(i), reason)));
    }
    let mut views = Vec::with_capacity(2);
    for j in 0..2 {
        match find_alternate(clip, gt, j, ctx, rng, &mut audit) {
            Ok(Some(v)) => views.push(v),
            Ok(None) => {
                let fail = AuditEntry::fail(Check::ViewConsistency, Some(j), RejectReason::ViewInconsistent)
                    .with_detail("no alternate frame passed");
                return Ok(skipped(id, audit, fail));
            }
            Err(e) => return Ok(skipped(id, audit, port_failure(e))),
        }
    }
    let text = match ctx.ports.captioner.caption(image, triple) {
        Ok(t) => t,
        Err(e) => return Ok(skipped(id, audit, port_failure(e))),
    };
    let caption = match GroundedCaption::from_phrases(text, &[&triple.subject, &triple.object]) {
        Ok(c) => c,
        Err(e) => {
            let fail = AuditEntry::fail(Check::Caption, None, RejectReason::UngroundedCaption).with_detail(e.to_string());
            return Ok(skipped(id, audit, fail));
        }
    };
    audit.push(AuditEntry::pass(Check::Caption, None));
    let parts = candidates
        .into_iter()
        .zip(views)
        .map(|(c, v)| Part {
            label: c.label,
            mask: c.mask,
            alternate: Some(v),
        })
        .collect();
    assemble(id, SourceTag::Video, image, parts, caption, audit, Some(gt), ctx.store).map(|r| BuildOutcome::Record(Box::new(r)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectedObject {
    pub label: String,
    pub bbox: BBox,
    /// The same object photographed separately.
    pub view: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectedItem {
    pub id: String,
    pub image: Image,
    pub objects: Vec<CollectedObject>,
}

/// Imports a curated scene with separately captured object views; the
/// caption comes from the outliner as in the top-down path.
pub fn build_collected_record(item: &CollectedItem, ctx: &BuildContext<'_>) -> Result<BuildOutcome> {
    let id = item.id.as_str();
    let image = &item.image;
    let mut candidates = Vec::with_capacity(item.objects.len());
    for o in &item.objects {
        match ctx.ports.segmenter.mask_in_box(image, &o.bbox) {
            Ok(mask) => candidates.push(Candidate {
                label: o.label.clone(),
                mask,
            }),
            Err(e) => return Ok(skipped(id, Vec::new(), port_failure(e))),
        }
    }
    let filtered = filter_object_candidates(&candidates, ctx.rules, image.dims());
    let mut audit = filtered.audit;
    if let Some(fail) = entity_count(&mut audit, filtered.accepted.len()) {
        return Ok(skipped(id, audit, fail));
    }
    let pick = [filtered.accepted[0], filtered.accepted[1]];
    for (k, &i) in pick.iter().enumerate() {
        let bbox = candidates[i].mask.bounding_box().expect("area-filtered mask");
        let reference = image.crop(&bbox).expect("non-empty box");
        match check_view_consistency(&reference, &item.objects[i].view, ctx.ports.view_scorer.as_ref(), ctx.rules) {
            Ok(c) if c.passed => audit.push(AuditEntry::pass(Check::ViewConsistency, Some(k))),
            Ok(c) => {
                let fail = AuditEntry::fail(Check::ViewConsistency, Some(k), RejectReason::ViewInconsistent)
                    .with_detail(format!("similarity {:.4}", c.similarity));
                return Ok(skipped(id, audit, fail));
            }
            Err(e) => return Ok(skipped(id, audit, port_failure(e))),
        }
    }
    let boxes = pick.map(|i| candidates[i].mask.bounding_box().expect("area-filtered mask"));
    let labels = pick.map(|i| candidates[i].label.as_str());
    let text = match ctx.ports.outliner.describe(image, &outlines_for(boxes), labels) {
        Ok(t) => t,
        Err(e) => return Ok(skipped(id, audit, port_failure(e))),
    };
    let caption = match strip_outline_phrases(&text, [OUTLINE_COLORS[0].0, OUTLINE_COLORS[1].0]) {
        Ok(c) => c,
        Err(e) => {
            let fail = AuditEntry::fail(Check::Caption, None, RejectReason::UngroundedCaption).with_detail(e.to_string());
            return Ok(skipped(id, audit, fail));
        }
    };
    audit.push(AuditEntry::pass(Check::Caption, None));
    let parts = pick
        .iter()
        .map(|&i| Part {
            label: candidates[i].label.clone(),
            mask: candidates[i].mask.clone(),
            alternate: Some(item.objects[i].view.clone()),
        })
        .collect();
    assemble(id, SourceTag::Collected, image, parts, caption, audit, None, ctx.store).map(|r| BuildOutcome::Record(Box::new(r)))
}
