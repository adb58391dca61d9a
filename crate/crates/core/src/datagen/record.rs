use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::filters::{AuditEntry, FilterRules, RejectReason};
use crate::embedding::GroundedCaption;
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::{validate_layout, BBox, BinaryMask, LayoutSpec};
use crate::trainer::TrainingSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Video,
    Topdown,
    Bottomup,
    Collected,
}

impl SourceTag {
    /// Sources that supply each object from a second viewpoint.
    pub fn has_alternate_views(self) -> bool {
        matches!(self, SourceTag::Video | SourceTag::Collected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivationRule {
    /// The ground truth itself; the inpainting region is blanked downstream.
    GroundTruthMasked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSpec {
    File(PathBuf),
    Derived(DerivationRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub label: String,
    /// Crop of the object in the ground-truth frame.
    pub image: PathBuf,
    pub bbox: BBox,
    pub segmentation: PathBuf,
    /// Crop of the same object from another view; used as the conditioning
    /// image when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate_view: Option<PathBuf>,
}

/// One manifest line. Paths are relative to the manifest's directory and
/// fields not listed here are carried through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub source: SourceTag,
    pub ground_truth: PathBuf,
    pub background: BackgroundSpec,
    pub objects: Vec<ObjectEntry>,
    pub global: BBox,
    pub caption: GroundedCaption,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl DatasetRecord {
    pub fn layout(&self) -> LayoutSpec {
        LayoutSpec::new(self.objects.iter().map(|o| o.bbox).collect(), self.global)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidLayout(format!("record {}: {reason}", self.id));
        if self.objects.is_empty() {
            return Err(bad("no objects".into()));
        }
        validate_layout(&self.layout()).map_err(|v| bad(v.to_string()))?;
        self.caption.validate()?;
        if let Some(s) = self.caption.spans.iter().find(|s| s.object >= self.objects.len()) {
            return Err(bad(format!("span names object {} of {}", s.object, self.objects.len())));
        }
        let alternates = self.objects.iter().filter(|o| o.alternate_view.is_some()).count();
        let expected = if self.source.has_alternate_views() {
            self.objects.len()
        } else {
            0
        };
        if alternates != expected {
            return Err(bad(format!(
                "{:?} records need {expected} alternate views, found {alternates}",
                self.source
            )));
        }
        Ok(())
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

pub fn write_manifest(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses and validates every non-blank line; errors name the 1-based line.
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let malformed = |reason: String| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            rec.validate().map_err(|e| malformed(e.to_string()))?;
            Ok(rec)
        })
        .collect()
}

/// Writes images and masks under a root directory and hands back paths
/// relative to it.
#[derive(Debug, Clone)]
pub struct AssetStore {
    root: PathBuf,
}

impl AssetStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(AssetStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let full = self.root.join(rel);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(full)
    }

    pub fn put_image(&self, rel: &str, image: &Image) -> Result<PathBuf> {
        image.save_png(&self.prepare(rel)?)?;
        Ok(PathBuf::from(rel))
    }

    pub fn put_mask(&self, rel: &str, mask: &BinaryMask) -> Result<PathBuf> {
        mask.save_png(&self.prepare(rel)?)?;
        Ok(PathBuf::from(rel))
    }
}

/// Loads a record's rasters into a training sample. `root` is the
/// directory the record's paths are relative to.
pub fn load_training_sample(record: &DatasetRecord, root: &Path) -> Result<TrainingSample> {
    let image = Image::load_png(&root.join(&record.ground_truth))?;
    let background = match &record.background {
        BackgroundSpec::File(p) => Image::load_png(&root.join(p))?,
        BackgroundSpec::Derived(DerivationRule::GroundTruthMasked) => image.clone(),
    };
    let object_images = record
        .objects
        .iter()
        .map(|o| Image::load_png(&root.join(o.alternate_view.as_ref().unwrap_or(&o.image))))
        .collect::<Result<_>>()?;
    let segmentations = record
        .objects
        .iter()
        .map(|o| BinaryMask::load_png(&root.join(&o.segmentation)))
        .collect::<Result<_>>()?;
    let sample = TrainingSample {
        id: record.id.clone(),
        image,
        background,
        layout: record.layout(),
        object_images,
        segmentations,
        caption: record.caption.clone(),
    };
    sample.validate()?;
    Ok(sample)
}

/// Re-applies the area and duplicate rules to a record's stored masks,
/// returning every violation found.
pub fn revalidate(record: &DatasetRecord, root: &Path, rules: &FilterRules) -> Result<Vec<(usize, RejectReason)>> {
    let masks: Vec<BinaryMask> = record
        .objects
        .iter()
        .map(|o| BinaryMask::load_png(&root.join(&o.segmentation)))
        .collect::<Result<_>>()?;
    let candidates: Vec<_> = record
        .objects
        .iter()
        .zip(masks)
        .map(|(o, mask)| super::Candidate {
            label: o.label.clone(),
            mask,
        })
        .collect();
    let Some(dims) = candidates.first().map(|c| c.mask.dims()) else {
        return Ok(Vec::new());
    };
    Ok(super::filter_object_candidates(&candidates, rules, dims).rejected)
}
