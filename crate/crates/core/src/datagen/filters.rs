use serde::{Deserialize, Serialize};

use super::ports::ViewScorer;
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::layout::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRules {
    pub min_area_frac: f64,
    pub max_area_frac: f64,
    pub view_similarity_min: f64,
    /// Masks overlapping an earlier accepted mask above this IoU are dropped.
    pub duplicate_iou: f64,
    /// Entity labels treated as scenery rather than objects.
    pub background_labels: Vec<String>,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_area_frac: 0.10,
            max_area_frac: 0.75,
            view_similarity_min: 0.8,
            duplicate_iou: 0.9,
            background_labels: ["sky", "wall", "floor", "ground", "road", "grass", "water", "ceiling", "background"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_area_frac && self.min_area_frac < self.max_area_frac && self.max_area_frac <= 1.0) {
            return Err(Error::Config(format!(
                "area bounds must satisfy 0 < min < max <= 1, got {} and {}",
                self.min_area_frac, self.max_area_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.view_similarity_min) || !(0.0..=1.0).contains(&self.duplicate_iou) {
            return Err(Error::Config("similarity and IoU thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_background_label(&self, label: &str) -> bool {
        let label = label.trim().to_lowercase();
        self.background_labels.contains(&label)
    }
}

/// The filter that produced an audit entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Bounds,
    Label,
    Area,
    Duplicate,
    EntityCount,
    ViewConsistency,
    Port,
    Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    OutOfBounds,
    BackgroundEntity,
    TooSmall,
    TooLarge,
    Duplicate,
    InsufficientEntities,
    ViewInconsistent,
    PortFailure,
    UngroundedCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub check: Check,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl AuditEntry {
    pub fn pass(check: Check, candidate: Option<usize>) -> Self {
        AuditEntry {
            check,
            candidate,
            passed: true,
            reason: None,
            detail: None,
        }
    }

    pub fn fail(check: Check, candidate: Option<usize>, reason: RejectReason) -> Self {
        AuditEntry {
            check,
            candidate,
            passed: false,
            reason: Some(reason),
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// An object proposal: a label and its full-frame mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub label: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    /// Indices into the candidate list, in input order.
    pub accepted: Vec<usize>,
    pub rejected: Vec<(usize, RejectReason)>,
    pub audit: Vec<AuditEntry>,
}

/// Applies the bounds, scenery-label, area and duplicate rules in that
/// order; a candidate stops at its first failure.
pub fn filter_object_candidates(candidates: &[Candidate], rules: &FilterRules, image_size: (usize, usize)) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for (i, cand) in candidates.iter().enumerate() {
        let verdict = (|| {
            if cand.mask.dims() != image_size {
                return Err((Check::Bounds, RejectReason::OutOfBounds));
            }
            out.audit.push(AuditEntry::pass(Check::Bounds, Some(i)));
            if rules.is_background_label(&cand.label) {
                return Err((Check::Label, RejectReason::BackgroundEntity));
            }
            out.audit.push(AuditEntry::pass(Check::Label, Some(i)));
            let frac = cand.mask.area_fraction();
            if frac < rules.min_area_frac {
                return Err((Check::Area, RejectReason::TooSmall));
            }
            if frac > rules.max_area_frac {
                return Err((Check::Area, RejectReason::TooLarge));
            }
            out.audit.push(AuditEntry::pass(Check::Area, Some(i)));
            if out
                .accepted
                .iter()
                .any(|&j| candidates[j].mask.iou(&cand.mask) > rules.duplicate_iou)
            {
                return Err((Check::Duplicate, RejectReason::Duplicate));
            }
            out.audit.push(AuditEntry::pass(Check::Duplicate, Some(i)));
            Ok(())
        })();
        match verdict {
            Ok(()) => out.accepted.push(i),
            Err((check, reason)) => {
                out.audit.push(AuditEntry::fail(check, Some(i), reason));
                out.rejected.push((i, reason));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewCheck {
    pub similarity: f64,
    pub passed: bool,
}

/// Scores two crops of the same object and compares against the
/// similarity threshold.
pub fn check_view_consistency(a: &Image, b: &Image, scorer: &dyn ViewScorer, rules: &FilterRules) -> Result<ViewCheck> {
    if a.height() * a.width() == 0 || b.height() * b.width() == 0 {
        return Err(Error::Port {
            port: "view_scorer",
            reason: "empty crop".into(),
        });
    }
    let similarity = scorer.similarity(a, b)?;
    Ok(ViewCheck {
        similarity,
        passed: similarity >= rules.view_similarity_min,
    })
}
