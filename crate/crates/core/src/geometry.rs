//! Bounding-box arithmetic, IoU and non-maximum suppression.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box ({x0}, {y0}, {x1}, {y1}): need finite coordinates with x0 < x1 and y0 < y1")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("box {0} has zero width or height after clipping to the image")]
    DegenerateBox(BBox),
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f32),
}

/// Axis-aligned rectangle in pixel coordinates, origin top-left.
///
/// Coordinates stay floating point; they are only rasterized when a crop is
/// cut out of an image (see [`BBox::pixel_rect`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let finite = x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite();
        if !finite || x0 >= x1 || y0 >= y1 {
            return Err(GeometryError::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Builds a box from COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Closed containment test, edges included.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Integer pixel rectangle `(x0, y0, x1, y1)` covering the box: floor for
    /// the top-left corner, ceil for the bottom-right one.
    pub fn pixel_rect(&self) -> (i64, i64, i64, i64) {
        (
            self.x0.floor() as i64,
            self.y0.floor() as i64,
            self.x1.ceil() as i64,
            self.y1.ceil() as i64,
        )
    }

    /// COCO `[x, y, w, h]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Intersection over union. Boxes that only share an edge score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x1.min(b.x1) - a.x0.max(b.x0);
    let ih = a.y1.min(b.y1) - a.y0.max(b.y0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamps a box to `[0, width] × [0, height]`.
pub fn clip(b: &BBox, width: u32, height: u32) -> Result<BBox, GeometryError> {
    let (w, h) = (f64::from(width), f64::from(height));
    let x0 = b.x0.clamp(0.0, w);
    let y0 = b.y0.clamp(0.0, h);
    let x1 = b.x1.clamp(0.0, w);
    let y1 = b.y1.clamp(0.0, h);
    if x0 >= x1 || y0 >= y1 {
        return Err(GeometryError::DegenerateBox(*b));
    }
    Ok(BBox { x0, y0, x1, y1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Line,
    Word,
    Char,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Line, ObjectClass::Word, ObjectClass::Char];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Line => "line",
            ObjectClass::Word => "word",
            ObjectClass::Char => "char",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "line" => Some(ObjectClass::Line),
            "word" => Some(ObjectClass::Word),
            "char" => Some(ObjectClass::Char),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub bbox: BBox,
    pub class: ObjectClass,
    confidence: f32,
}

impl DetectedObject {
    pub fn new(bbox: BBox, class: ObjectClass, confidence: f32) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::InvalidConfidence(confidence));
        }
        Ok(Self {
            bbox,
            class,
            confidence,
        })
    }

    pub fn confidence(&self) -> f32 {
        self.confidence
    }
}

/// Ranking used by [`nms`]: confidence descending, then smaller `x0`, then
/// smaller `y0`. The remaining fields only matter for exact duplicates and
/// keep the order total.
pub fn detection_rank(a: &DetectedObject, b: &DetectedObject) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.x0.total_cmp(&b.bbox.x0))
        .then(a.bbox.y0.total_cmp(&b.bbox.y0))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.class.cmp(&b.class))
}

/// Greedy class-wise non-maximum suppression.
///
/// A detection survives iff its IoU with every higher-ranked surviving
/// detection of the same class is `<= iou_thresh`. The result is sorted by
/// [`detection_rank`].
pub fn nms(dets: &[DetectedObject], iou_thresh: f64) -> Vec<DetectedObject> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_rank);

    let mut kept: Vec<DetectedObject> = Vec::with_capacity(sorted.len());
    // Survivors per class, so each candidate is only compared within its class.
    let mut by_class: [Vec<BBox>; 3] = Default::default();
    for det in sorted {
        let slot = &mut by_class[det.class as usize];
        if slot.iter().all(|k| iou(k, &det.bbox) <= iou_thresh) {
            slot.push(det.bbox);
            kept.push(det);
        }
    }
    kept
}
