//! Paired-data pipeline: source adapters, quality filters, model ports and
//! the JSONL manifest.

mod filters;
mod ports;
mod record;
mod sources;

pub use filters::{
    check_view_consistency, filter_object_candidates, AuditEntry, Candidate, Check, FilterOutcome, FilterRules,
    RejectReason, ViewCheck,
};
pub use ports::{
    channel_histograms, cosine, fingerprint, Captioner, Entity, EntityHint, FixedScorer, GroundedPhrase, Grounder,
    HintBook, Hints, HistogramScorer, HttpPorts, ModelPorts, Outline, Outliner, PortBinding, ProjectionScorer,
    RelationTriple, Segmenter, TemplateCaptioner, ViewScorer, HISTOGRAM_BINS,
};
pub use record::{
    load_training_sample, read_manifest, revalidate, write_manifest, AssetStore, BackgroundSpec, DatasetRecord,
    DerivationRule, ObjectEntry, SourceTag,
};
pub use sources::{
    build_bottomup_record, build_collected_record, build_topdown_record, build_video_record, choose_ground_truth_frame,
    draw_outlines, relation_tag, strip_outline_phrases, BuildContext, BuildOutcome, ClipAnnotation, CollectedItem,
    CollectedObject, VideoClip, OUTLINE_COLORS,
};

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::BBox;
use crate::synthetic::Scene;

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown source {s:?}; expected video, topdown, bottomup or collected")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    pub source: SourceTag,
    pub input: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rules: FilterRules,
    #[serde(default = "default_binding")]
    pub ports: PortBinding,
}

fn default_binding() -> PortBinding {
    PortBinding::Mock
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub audit: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenSummary {
    pub records: usize,
    pub skipped: Vec<SkippedItem>,
}

/// Sidecar for a collected scene: where each object's separate view lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedSidecar {
    pub objects: Vec<CollectedSidecarObject>,
    #[serde(default)]
    pub relation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedSidecarObject {
    pub label: String,
    pub bbox: BBox,
    pub view: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            if want_dirs {
                p.is_dir()
            } else {
                p.extension().is_some_and(|x| x == "png")
            }
        })
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

enum Item {
    Still { id: String, image: Image, caption: Option<String> },
    Clip(VideoClip),
    Collected(CollectedItem),
}

fn load_items(cfg: &DatagenConfig, hints: &mut HintBook) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    match cfg.source {
        SourceTag::Topdown | SourceTag::Bottomup => {
            for png in sorted_entries(&cfg.input, false)? {
                let image = Image::load_png(&png)?;
                let sidecar = png.with_extension("json");
                let h: Hints = if sidecar.exists() { read_json(&sidecar)? } else { Hints::default() };
                let caption = h.caption.clone();
                hints.insert(&image, h);
                items.push(Item::Still {
                    id: stem(&png),
                    image,
                    caption,
                });
            }
        }
        SourceTag::Video => {
            for dir in sorted_entries(&cfg.input, true)? {
                let annotation: ClipAnnotation = read_json(&dir.join("clip.json"))?;
                let frames = sorted_entries(&dir, false)?
                    .iter()
                    .map(|p| Image::load_png(p))
                    .collect::<Result<Vec<_>>>()?;
                items.push(Item::Clip(VideoClip {
                    id: stem(&dir),
                    frames,
                    annotation,
                }));
            }
        }
        SourceTag::Collected => {
            for png in sorted_entries(&cfg.input, false)? {
                let sidecar_path = png.with_extension("json");
                if !sidecar_path.exists() {
                    continue;
                }
                let image = Image::load_png(&png)?;
                let sidecar: CollectedSidecar = read_json(&sidecar_path)?;
                let objects = sidecar
                    .objects
                    .iter()
                    .map(|o| {
                        Ok(CollectedObject {
                            label: o.label.clone(),
                            bbox: o.bbox,
                            view: Image::load_png(&cfg.input.join(&o.view))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                hints.insert(
                    &image,
                    Hints {
                        entities: objects
                            .iter()
                            .map(|o| EntityHint {
                                label: o.label.clone(),
                                bbox: o.bbox,
                            })
                            .collect(),
                        relation: sidecar.relation.clone(),
                        caption: None,
                    },
                );
                items.push(Item::Collected(CollectedItem {
                    id: stem(&png),
                    image,
                    objects,
                }));
            }
        }
    }
    Ok(items)
}

/// Builds every input item under `cfg.input` into a manifest. Items are
/// processed in parallel; item `k` draws from stream `k` of the seed, and
/// results keep input order. Skipped items go to `<manifest>.skipped.jsonl`.
pub fn run_datagen(cfg: &DatagenConfig) -> Result<DatagenSummary> {
    cfg.rules.validate()?;
    let mut hints = HintBook::default();
    let items = load_items(cfg, &mut hints)?;
    let ports = ModelPorts::from_binding(&cfg.ports, hints);
    let root = cfg
        .manifest
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let store = AssetStore::new(root)?;
    let ctx = BuildContext {
        ports: &ports,
        rules: &cfg.rules,
        store: &store,
    };
    let outcomes = items
        .par_iter()
        .enumerate()
        .map(|(k, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            match item {
                Item::Still { id, image, caption } => match cfg.source {
                    SourceTag::Bottomup => match caption {
                        Some(c) => build_bottomup_record(id, image, c, &ctx, &mut rng),
                        None => Err(Error::InvalidCaption(format!("{id}: bottom-up input needs a caption"))),
                    },
                    _ => build_topdown_record(id, image, &ctx, &mut rng),
                },
                Item::Clip(clip) => build_video_record(clip, &ctx, &mut rng),
                Item::Collected(c) => build_collected_record(c, &ctx),
            }
        })
        .collect::<Vec<Result<BuildOutcome>>>();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome? {
            BuildOutcome::Record(r) => records.push(*r),
            BuildOutcome::Skipped { id, audit } => skipped.push(SkippedItem { id, audit }),
        }
    }
    write_manifest(&records, &cfg.manifest)?;
    let mut log = String::new();
    for s in &skipped {
        log.push_str(&serde_json::to_string(s)?);
        log.push('\n');
    }
    let skipped_path = cfg.manifest.with_extension("skipped.jsonl");
    std::fs::write(&skipped_path, log).map_err(|e| Error::io(&skipped_path, e))?;
    Ok(DatagenSummary {
        records: records.len(),
        skipped,
    })
}

/// Writes synthetic scenes as bottom-up inputs: each image with a sidecar
/// holding its caption, relation and per-object boxes.
pub fn export_synthetic_inputs(scenes: &[Scene], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for scene in scenes {
        scene.image.save_png(&dir.join(format!("{}.png", scene.id)))?;
        let hints = Hints {
            entities: scene
                .objects
                .iter()
                .map(|o| EntityHint {
                    label: o.label(),
                    bbox: o.bbox,
                })
                .collect(),
            relation: scene.relation.clone(),
            caption: Some(scene.caption.text.clone()),
        };
        let path = dir.join(format!("{}.json", scene.id));
        std::fs::write(&path, serde_json::to_string_pretty(&hints)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
