//! Layout input: per-object boxes plus the enclosing inpainting box, and
//! their rasterization into the single-channel conditioning mask.
//!
//! All geometry lives in normalized image coordinates `[0, 1]`. A pixel
//! belongs to a box when its center lies inside the half-open box
//! `[x0, x1) x [y0, y1)`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized coordinates. Serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const UNIT: BBox = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Half-open point containment, the rasterization rule.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        );
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    /// True when the boxes share a region of positive area.
    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection(other).is_some()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).map_or(0.0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    /// Grows the box by `margin` on every side, clipped to the unit square.
    pub fn expand(&self, margin: f64) -> BBox {
        BBox::new(
            (self.x0 - margin).max(0.0),
            (self.y0 - margin).max(0.0),
            (self.x1 + margin).min(1.0),
            (self.y1 + margin).min(1.0),
        )
    }

    /// Box from pixel bounds `[c0, c1) x [r0, r1)` of an image of the given size.
    pub fn from_pixels(c0: usize, r0: usize, c1: usize, r1: usize, height: usize, width: usize) -> Self {
        BBox::new(
            c0 as f64 / width as f64,
            r0 as f64 / height as f64,
            c1 as f64 / width as f64,
            r1 as f64 / height as f64,
        )
    }
}

/// Object boxes plus the inpainting box that encloses them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    #[serde(rename = "objects")]
    pub object_boxes: Vec<BBox>,
    #[serde(rename = "global")]
    pub global_box: BBox,
    /// When set, the inpainting region is the whole frame.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub customization: bool,
}

impl LayoutSpec {
    pub fn new(object_boxes: Vec<BBox>, global_box: BBox) -> Self {
        LayoutSpec {
            object_boxes,
            global_box,
            customization: false,
        }
    }

    /// Layout whose inpainting box is the tightest box around all objects,
    /// grown by `margin`.
    pub fn enclosing(object_boxes: Vec<BBox>, margin: f64) -> Self {
        let global = object_boxes
            .iter()
            .copied()
            .reduce(|a, b| a.union(&b))
            .unwrap_or(BBox::UNIT)
            .expand(margin);
        LayoutSpec::new(object_boxes, global)
    }

    /// Same objects with a full-frame inpainting region.
    pub fn into_customization(mut self) -> Self {
        self.global_box = BBox::UNIT;
        self.customization = true;
        self
    }

    pub fn num_objects(&self) -> usize {
        self.object_boxes.len()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Any two object boxes share positive area.
    pub fn has_overlap(&self) -> bool {
        let b = &self.object_boxes;
        (0..b.len()).any(|i| (i + 1..b.len()).any(|j| b[i].intersects(&b[j])))
    }
}

/// Which box a [`LayoutViolation`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxRef {
    Object(usize),
    Global,
}

impl fmt::Display for BoxRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxRef::Object(i) => write!(f, "object box {i}"),
            BoxRef::Global => write!(f, "global box"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayoutViolation {
    NoObjects,
    NonFinite(BoxRef),
    OutOfRange(BoxRef),
    EmptyArea(BoxRef),
    NotEnclosed(usize),
    CustomizationNotFullFrame,
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutViolation::NoObjects => write!(f, "layout has no object boxes"),
            LayoutViolation::NonFinite(b) => write!(f, "{b}: non-finite coordinate"),
            LayoutViolation::OutOfRange(b) => write!(f, "{b}: coordinate out of range"),
            LayoutViolation::EmptyArea(b) => write!(f, "{b}: zero or negative area"),
            LayoutViolation::NotEnclosed(i) => {
                write!(f, "object box {i} is not enclosed by the global box")
            }
            LayoutViolation::CustomizationNotFullFrame => {
                write!(f, "customization layout must use the full frame as global box")
            }
        }
    }
}

pub type ValidationResult = std::result::Result<(), LayoutViolation>;

fn check_box(b: &BBox, which: BoxRef) -> ValidationResult {
    if !b.is_finite() {
        return Err(LayoutViolation::NonFinite(which));
    }
    if !b.in_unit_range() {
        return Err(LayoutViolation::OutOfRange(which));
    }
    if !(b.x0 < b.x1 && b.y0 < b.y1) {
        return Err(LayoutViolation::EmptyArea(which));
    }
    Ok(())
}

/// Checks every layout invariant, reporting the first one violated.
pub fn validate_layout(layout: &LayoutSpec) -> ValidationResult {
    if layout.object_boxes.is_empty() {
        return Err(LayoutViolation::NoObjects);
    }
    for (i, b) in layout.object_boxes.iter().enumerate() {
        check_box(b, BoxRef::Object(i))?;
    }
    check_box(&layout.global_box, BoxRef::Global)?;
    if layout.customization && layout.global_box != BBox::UNIT {
        return Err(LayoutViolation::CustomizationNotFullFrame);
    }
    for (i, b) in layout.object_boxes.iter().enumerate() {
        if !layout.global_box.contains_box(b) {
            return Err(LayoutViolation::NotEnclosed(i));
        }
    }
    Ok(())
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("BinaryMask", height * width, bits.len()));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|p| f(p / width, p % width)).collect();
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection(other).count();
        let union = self.union(other).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight normalized box around the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bounds = Some(match bounds {
                        None => (c, r, c + 1, r + 1),
                        Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c + 1), r1.max(r + 1)),
                    });
                }
            }
        }
        bounds.map(|(c0, r0, c1, r1)| BBox::from_pixels(c0, r0, c1, r1, self.height, self.width))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let data = self.bits.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
        save_gray(path, self.width, self.height, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let bits = img.pixels().map(|p| p.0[0] >= 128).collect();
        BinaryMask::from_bits(h as usize, w as usize, bits)
    }
}

fn save_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, data)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Pixels whose centers fall inside `bbox`.
///
/// A box thinner than one pixel pitch may select no pixel at all; callers
/// detect that with [`BinaryMask::is_empty`].
pub fn rasterize_box(bbox: &BBox, resolution: (usize, usize)) -> BinaryMask {
    let (h, w) = resolution;
    BinaryMask::from_fn(h, w, |r, c| {
        bbox.contains_point((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64)
    })
}

/// Max-pool reduction: a target pixel is set iff any source pixel of its block is.
pub fn downsample_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = target;
    if h == 0 || w == 0 || !mask.height.is_multiple_of(h) || !mask.width.is_multiple_of(w) {
        return Err(Error::NonDivisible {
            source_dims: mask.dims(),
            target,
        });
    }
    let (fy, fx) = (mask.height / h, mask.width / w);
    Ok(BinaryMask::from_fn(h, w, |r, c| {
        (0..fy).any(|dy| (0..fx).any(|dx| mask.get(r * fy + dy, c * fx + dx)))
    }))
}

/// Semantic class of a layout-mask pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Background,
    Inpaint,
    Object(usize),
    Overlap,
}

/// Region-to-value mapping for an `n_objects` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codebook {
    pub n_objects: usize,
}

impl Codebook {
    pub const BACKGROUND: f32 = 0.0;
    pub const INPAINT: f32 = 0.2;
    pub const OVERLAP: f32 = 1.0;

    pub fn new(n_objects: usize) -> Self {
        Codebook { n_objects }
    }

    pub fn value(&self, region: Region) -> f32 {
        match region {
            Region::Background => Self::BACKGROUND,
            Region::Inpaint => Self::INPAINT,
            Region::Overlap => Self::OVERLAP,
            Region::Object(i) => {
                let v = 0.4 + 0.5 * i as f64 / self.n_objects.max(1) as f64;
                v.min(0.95) as f32
            }
        }
    }

    /// Inverse of [`Codebook::value`]; `None` for values outside the codebook.
    pub fn classify(&self, value: f32) -> Option<Region> {
        let regions = [Region::Background, Region::Inpaint, Region::Overlap]
            .into_iter()
            .chain((0..self.n_objects).map(Region::Object));
        regions.into_iter().find(|&r| self.value(r) == value)
    }
}

/// The single-channel layout raster fed to the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub codebook: Codebook,
}

impl LayoutMask {
    /// Per-pixel region, recovered from the stored values.
    pub fn decode(&self) -> Vec<Option<Region>> {
        self.values.iter().map(|&v| self.codebook.classify(v)).collect()
    }

    /// Block-mean resize to `target`, used to align the mask with latent resolution.
    pub fn resize_mean(&self, target: (usize, usize)) -> Result<Vec<f32>> {
        let (h, w) = target;
        if h == 0 || w == 0 || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w) {
            return Err(Error::NonDivisible {
                source_dims: (self.height, self.width),
                target,
            });
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let norm = (fy * fx) as f32;
        let mut out = vec![0f32; h * w];
        for r in 0..self.height {
            for c in 0..self.width {
                out[(r / fy) * w + c / fx] += self.values[r * self.width + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        Ok(out)
    }

    /// Exports the mask as 8-bit grayscale, values scaled by 255 and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let data = self
            .values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        save_gray(path, self.width, self.height, data)
    }
}

/// Per-pixel region classification at the given resolution.
pub fn classify_pixels(layout: &LayoutSpec, resolution: (usize, usize)) -> Result<Vec<Region>> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::ZeroResolution(h, w));
    }
    let global = rasterize_box(&layout.global_box, resolution);
    let objects: Vec<BinaryMask> = layout
        .object_boxes
        .iter()
        .map(|b| rasterize_box(b, resolution))
        .collect();
    Ok((0..h * w)
        .map(|p| {
            let mut hits = objects.iter().enumerate().filter(|(_, m)| m.bits[p]);
            match (hits.next(), hits.next()) {
                (Some(_), Some(_)) => Region::Overlap,
                (Some((i, _)), None) => Region::Object(i),
                _ if global.bits[p] => Region::Inpaint,
                _ => Region::Background,
            }
        })
        .collect())
}

/// Rasterizes a validated layout into the conditioning mask.
pub fn encode_layout(layout: &LayoutSpec, resolution: (usize, usize)) -> Result<LayoutMask> {
    validate_layout(layout).map_err(|v| Error::InvalidLayout(v.to_string()))?;
    let codebook = Codebook::new(layout.num_objects());
    let regions = classify_pixels(layout, resolution)?;
    Ok(LayoutMask {
        height: resolution.0,
        width: resolution.1,
        values: regions.into_iter().map(|r| codebook.value(r)).collect(),
        codebook,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_global(objects: Vec<BBox>) -> LayoutSpec {
        LayoutSpec::new(objects, BBox::UNIT)
    }

    #[test]
    fn validate_examples() {
        let ok = unit_global(vec![BBox::new(0.1, 0.1, 0.4, 0.4)]);
        assert_eq!(validate_layout(&ok), Ok(()));

        let out = unit_global(vec![BBox::new(0.5, 0.5, 1.2, 0.9)]);
        assert_eq!(
            validate_layout(&out),
            Err(LayoutViolation::OutOfRange(BoxRef::Object(0)))
        );

        let loose = LayoutSpec::new(
            vec![BBox::new(0.0, 0.0, 0.6, 0.6)],
            BBox::new(0.1, 0.1, 0.9, 0.9),
        );
        assert_eq!(validate_layout(&loose), Err(LayoutViolation::NotEnclosed(0)));
    }

    #[test]
    fn validate_rejects_degenerate_inputs() {
        assert_eq!(
            validate_layout(&unit_global(vec![])),
            Err(LayoutViolation::NoObjects)
        );
        let nan = unit_global(vec![BBox::new(f64::NAN, 0.0, 0.5, 0.5)]);
        assert_eq!(
            validate_layout(&nan),
            Err(LayoutViolation::NonFinite(BoxRef::Object(0)))
        );
        let flat = unit_global(vec![BBox::new(0.2, 0.2, 0.2, 0.5)]);
        assert_eq!(
            validate_layout(&flat),
            Err(LayoutViolation::EmptyArea(BoxRef::Object(0)))
        );
        let mut custom = LayoutSpec::new(
            vec![BBox::new(0.2, 0.2, 0.4, 0.4)],
            BBox::new(0.1, 0.1, 0.9, 0.9),
        );
        custom.customization = true;
        assert_eq!(
            validate_layout(&custom),
            Err(LayoutViolation::CustomizationNotFullFrame)
        );
        assert_eq!(validate_layout(&custom.into_customization()), Ok(()));
    }

    #[test]
    fn encode_single_full_frame_object() {
        let layout = unit_global(vec![BBox::UNIT]);
        let mask = encode_layout(&layout, (8, 8)).unwrap();
        let obj0 = mask.codebook.value(Region::Object(0));
        assert!(mask.values.iter().all(|&v| v == obj0));
    }

    #[test]
    fn encode_two_disjoint_quarter_boxes() {
        // Each box covers a 4x4 quadrant of the 8x8 grid.
        let layout = unit_global(vec![
            BBox::new(0.0, 0.0, 0.5, 0.5),
            BBox::new(0.5, 0.5, 1.0, 1.0),
        ]);
        let mask = encode_layout(&layout, (8, 8)).unwrap();
        let regions = mask.decode();
        let count = |r: Region| regions.iter().filter(|&&x| x == Some(r)).count();
        assert_eq!(count(Region::Object(0)), 16);
        assert_eq!(count(Region::Object(1)), 16);
        assert_eq!(count(Region::Inpaint), 32);
        assert_eq!(count(Region::Overlap), 0);
        assert_eq!(count(Region::Background), 0);
    }

    #[test]
    fn identical_boxes_are_all_overlap() {
        let b = BBox::new(0.25, 0.25, 0.75, 0.75);
        let layout = unit_global(vec![b, b]);
        let mask = encode_layout(&layout, (8, 8)).unwrap();
        let inside = rasterize_box(&b, (8, 8));
        for (p, v) in mask.values.iter().enumerate() {
            if inside.bits()[p] {
                assert_eq!(*v, Codebook::OVERLAP);
            } else {
                assert_eq!(*v, Codebook::INPAINT);
            }
        }
    }

    #[test]
    fn encode_rejects_zero_resolution() {
        let layout = unit_global(vec![BBox::UNIT]);
        assert!(matches!(
            encode_layout(&layout, (0, 4)),
            Err(Error::ZeroResolution(0, 4))
        ));
    }

    #[test]
    fn rasterize_examples() {
        assert_eq!(rasterize_box(&BBox::UNIT, (4, 4)).count(), 16);
        let tl = rasterize_box(&BBox::new(0.0, 0.0, 0.5, 0.5), (4, 4));
        let expected = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        assert_eq!(tl, expected);
        let sliver = rasterize_box(&BBox::new(0.30, 0.0, 0.32, 1.0), (4, 4));
        assert!(sliver.is_empty());
    }

    #[test]
    fn downsample_examples() {
        let ones = BinaryMask::full(8, 8);
        assert_eq!(downsample_mask(&ones, (4, 4)).unwrap(), BinaryMask::full(4, 4));

        let mut single = BinaryMask::new(8, 8);
        single.set(5, 2, true);
        let d = downsample_mask(&single, (4, 4)).unwrap();
        assert_eq!(d.count(), 1);
        assert!(d.get(2, 1));

        let checker = BinaryMask::from_fn(8, 8, |r, c| (r + c) % 2 == 0);
        assert_eq!(downsample_mask(&checker, (4, 4)).unwrap(), BinaryMask::full(4, 4));

        assert!(matches!(
            downsample_mask(&ones, (3, 3)),
            Err(Error::NonDivisible { .. })
        ));
    }

    #[test]
    fn codebook_values_distinct_and_bounded() {
        for n in 1..12 {
            let cb = Codebook::new(n);
            let mut vals: Vec<f32> = (0..n).map(|i| cb.value(Region::Object(i))).collect();
            vals.extend([Codebook::BACKGROUND, Codebook::INPAINT, Codebook::OVERLAP]);
            let mut sorted = vals.clone();
            sorted.sort_by(f32::total_cmp);
            sorted.dedup();
            assert_eq!(sorted.len(), vals.len());
            assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(Codebook::new(2).value(Region::Object(1)), 0.65);
    }

    #[test]
    fn layout_json_schema() {
        let s = r#"{"objects":[[0.1,0.1,0.4,0.4],[0.5,0.2,0.9,0.8]],"global":[0,0,1,1]}"#;
        let layout = LayoutSpec::from_json(s).unwrap();
        assert_eq!(layout.object_boxes[1], BBox::new(0.5, 0.2, 0.9, 0.8));
        assert_eq!(layout.global_box, BBox::UNIT);
        assert!(!layout.customization);
        let back = serde_json::to_string(&layout).unwrap();
        assert_eq!(LayoutSpec::from_json(&back).unwrap(), layout);
    }

    #[test]
    fn enclosing_layout_is_valid() {
        let layout = LayoutSpec::enclosing(
            vec![BBox::new(0.1, 0.2, 0.3, 0.4), BBox::new(0.5, 0.5, 0.95, 0.9)],
            0.1,
        );
        assert_eq!(validate_layout(&layout), Ok(()));
        assert_eq!(layout.global_box, BBox::new(0.0, 0.1, 1.0, 1.0));
    }

    #[test]
    fn mask_png_export_scales_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let layout = unit_global(vec![BBox::new(0.0, 0.0, 0.5, 1.0)]);
        let mask = encode_layout(&layout, (4, 4)).unwrap();
        mask.save_png(&path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 0).0[0], 102); // 0.4 * 255
        assert_eq!(img.get_pixel(3, 0).0[0], 51); // 0.2 * 255
    }
}
