//! Line detection and word/character localization.
//!
//! Model-file detectors run an ONNX graph on a letterboxed page (or line)
//! and emit rows of `cx, cy, w, h, objectness, class scores…` in model input
//! coordinates; [`decode`] turns those into boxes in image coordinates.
//! Ground-truth detectors replay COCO annotations instead, which lets the
//! recognition stack run without trained localizers.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{clip, nms, BBox, DetectedObject, ObjectClass};
use crate::image::ImageCrop;
use crate::onnx::OnnxModel;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("invalid detector spec: {0}")]
    InvalidSpec(String),
    #[error("cannot load detector model {path}: {reason}")]
    ModelLoad { path: String, reason: String },
    #[error("detector inference failed: {0}")]
    Inference(String),
    #[error("no ground-truth annotations for {0}")]
    MissingAnnotation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    ModelFile,
    GroundTruth,
}

/// How a row's confidence is formed from its scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfMode {
    /// `objectness × max(class scores)`
    #[default]
    ObjectnessTimesClass,
    /// `max(class scores)`; objectness is ignored.
    ClassOnly,
}

pub const DEFAULT_CONF_THRESH: f32 = 0.25;
pub const DEFAULT_IOU_THRESH: f32 = 0.45;

fn default_conf() -> f32 {
    DEFAULT_CONF_THRESH
}
fn default_iou() -> f32 {
    DEFAULT_IOU_THRESH
}
fn default_input_size() -> [u32; 2] {
    [640, 640]
}
fn default_channels() -> u32 {
    3
}
fn default_classes() -> Vec<ObjectClass> {
    ObjectClass::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    /// COCO file used by ground-truth detectors when a job does not supply
    /// its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default = "default_conf")]
    pub conf_thresh: f32,
    #[serde(default = "default_iou")]
    pub iou_thresh: f32,
    /// `[height, width]` of the model input.
    #[serde(default = "default_input_size")]
    pub input_size: [u32; 2],
    /// Channels of the model input; gray is replicated across them.
    #[serde(default = "default_channels")]
    pub input_channels: u32,
    /// Model class index → object class.
    #[serde(default = "default_classes")]
    pub classes: Vec<ObjectClass>,
    #[serde(default)]
    pub conf_mode: ConfMode,
}

impl DetectorSpec {
    pub fn ground_truth() -> Self {
        Self {
            kind: DetectorKind::GroundTruth,
            model_path: None,
            annotations: None,
            conf_thresh: DEFAULT_CONF_THRESH,
            iou_thresh: DEFAULT_IOU_THRESH,
            input_size: default_input_size(),
            input_channels: default_channels(),
            classes: default_classes(),
            conf_mode: ConfMode::default(),
        }
    }

    pub fn model_file(path: impl Into<PathBuf>, input_size: [u32; 2], classes: Vec<ObjectClass>) -> Self {
        Self {
            kind: DetectorKind::ModelFile,
            model_path: Some(path.into()),
            input_size,
            classes,
            ..Self::ground_truth()
        }
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        let bad = |m: &str| Err(DetectionError::InvalidSpec(m.to_string()));
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return bad("conf_thresh must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return bad("iou_thresh must be in [0, 1]");
        }
        if self.classes.is_empty() {
            return bad("classes must not be empty");
        }
        if self.input_size[0] == 0 || self.input_size[1] == 0 {
            return bad("input_size must be positive");
        }
        if !matches!(self.input_channels, 1 | 3) {
            return bad("input_channels must be 1 or 3");
        }
        if self.kind == DetectorKind::ModelFile && self.model_path.is_none() {
            return bad("model_file detector requires model_path");
        }
        Ok(())
    }
}

/// One detector output row, in model input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub objectness: f32,
    pub class_scores: Vec<f32>,
}

/// Aspect-preserving resize into the model input, centred with padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub resized: (u32, u32),
}

impl Letterbox {
    /// `orig` is `(width, height)`, `input` is `[height, width]`.
    pub fn new(orig: (u32, u32), input: [u32; 2]) -> Self {
        let (ow, oh) = (f64::from(orig.0), f64::from(orig.1));
        let (ih, iw) = (f64::from(input[0]), f64::from(input[1]));
        let scale = (iw / ow).min(ih / oh);
        let rw = ((ow * scale).round() as u32).clamp(1, input[1]);
        let rh = ((oh * scale).round() as u32).clamp(1, input[0]);
        Self {
            scale,
            pad_x: f64::from((input[1] - rw) / 2),
            pad_y: f64::from((input[0] - rh) / 2),
            resized: (rw, rh),
        }
    }

    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }

    /// Builds the `1×C×H×W` model input; padding is YOLO gray (114/255).
    pub fn apply(&self, img: &ImageCrop, input: [u32; 2], channels: u32) -> Vec<f32> {
        const PAD: f32 = 114.0 / 255.0;
        let (rw, rh) = self.resized;
        let resized = img.resize_bilinear(rw, rh);
        let mut canvas = ImageCrop::filled(input[1], input[0], PAD).expect("positive input size");
        canvas.paste(&resized, self.pad_x as u32, self.pad_y as u32);
        let plane = canvas.pixels();
        let mut out = Vec::with_capacity(plane.len() * channels as usize);
        for _ in 0..channels {
            out.extend_from_slice(plane);
        }
        out
    }
}

/// Turns raw rows into boxes in original image coordinates: center/size to
/// corners, undo the letterbox, score, drop rows under `conf_thresh`, clip to
/// the image, then class-wise NMS. Rows whose best class index has no
/// mapping in `spec.classes` are dropped.
pub fn decode(raw: &[RawDetection], spec: &DetectorSpec, orig_size: (u32, u32)) -> Vec<DetectedObject> {
    let lb = Letterbox::new(orig_size, spec.input_size);
    let mut dets = Vec::new();
    for row in raw {
        if !(row.w > 0.0 && row.h > 0.0) {
            continue;
        }
        let Some((cls, best)) = row
            .class_scores
            .iter()
            .copied()
            .enumerate()
            .fold(None, |acc: Option<(usize, f32)>, (i, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((i, s)),
            })
        else {
            continue;
        };
        let conf = match spec.conf_mode {
            ConfMode::ObjectnessTimesClass => row.objectness * best,
            ConfMode::ClassOnly => best,
        };
        if !conf.is_finite() || conf < spec.conf_thresh {
            continue;
        }
        let Some(&class) = spec.classes.get(cls) else {
            continue;
        };
        let (cx, cy, w, h) = (
            f64::from(row.cx),
            f64::from(row.cy),
            f64::from(row.w),
            f64::from(row.h),
        );
        let (x0, y0) = lb.to_original(cx - w / 2.0, cy - h / 2.0);
        let (x1, y1) = lb.to_original(cx + w / 2.0, cy + h / 2.0);
        let Ok(bbox) = BBox::new(x0, y0, x1, y1) else {
            continue;
        };
        let Ok(bbox) = clip(&bbox, orig_size.0, orig_size.1) else {
            continue;
        };
        dets.push(DetectedObject::new(bbox, class, conf.clamp(0.0, 1.0)).expect("clamped"));
    }
    nms(&dets, f64::from(spec.iou_thresh))
}

/// Ground-truth boxes for one page, in page coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthPage {
    pub lines: Vec<BBox>,
    pub words: Vec<BBox>,
    pub chars: Vec<BBox>,
}

enum Backend {
    Model(OnnxModel),
    GroundTruth,
}

/// A constructed detector; shareable across threads.
pub struct Detector {
    spec: DetectorSpec,
    backend: Backend,
}

impl std::fmt::Debug for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector").field("spec", &self.spec).finish()
    }
}

impl Detector {
    pub fn new(spec: DetectorSpec) -> Result<Self, DetectionError> {
        spec.validate()?;
        let backend = match spec.kind {
            DetectorKind::GroundTruth => Backend::GroundTruth,
            DetectorKind::ModelFile => {
                let path = spec.model_path.as_deref().expect("validated");
                let [h, w] = spec.input_size;
                let shape = [1, spec.input_channels as usize, h as usize, w as usize];
                let model = OnnxModel::load(path, &shape).map_err(|reason| DetectionError::ModelLoad {
                    path: path.display().to_string(),
                    reason,
                })?;
                Backend::Model(model)
            }
        };
        Ok(Self { spec, backend })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn is_ground_truth(&self) -> bool {
        matches!(self.backend, Backend::GroundTruth)
    }

    fn run_model(&self, model: &OnnxModel, img: &ImageCrop) -> Result<Vec<DetectedObject>, DetectionError> {
        let lb = Letterbox::new((img.width(), img.height()), self.spec.input_size);
        let input = lb.apply(img, self.spec.input_size, self.spec.input_channels);
        let (shape, data) = model.run(&input).map_err(DetectionError::Inference)?;
        let rows = parse_rows(&shape, &data, self.spec.classes.len())?;
        Ok(decode(&rows, &self.spec, (img.width(), img.height())))
    }

    /// Line boxes in page coordinates.
    pub fn detect_lines(
        &self,
        page: &ImageCrop,
        gt: Option<&GroundTruthPage>,
    ) -> Result<Vec<DetectedObject>, DetectionError> {
        match &self.backend {
            Backend::Model(m) => Ok(self
                .run_model(m, page)?
                .into_iter()
                .filter(|d| d.class == ObjectClass::Line)
                .collect()),
            Backend::GroundTruth => {
                let gt = gt.ok_or_else(|| missing(page))?;
                Ok(replay(&gt.lines, ObjectClass::Line, page.width(), page.height()))
            }
        }
    }

    /// Word and character boxes for one line, in the line crop's coordinates.
    ///
    /// `line_crop` was cut from the page at integer offset `origin`. Ground
    /// truth replays every annotation whose center lies in `line_box`.
    pub fn localize(
        &self,
        line_crop: &ImageCrop,
        origin: (u32, u32),
        line_box: &BBox,
        gt: Option<&GroundTruthPage>,
        no_words: bool,
    ) -> Result<(Vec<DetectedObject>, Vec<DetectedObject>), DetectionError> {
        let (mut words, chars) = match &self.backend {
            Backend::Model(m) => {
                let dets = self.run_model(m, line_crop)?;
                let pick = |c: ObjectClass| dets.iter().filter(|d| d.class == c).copied().collect::<Vec<_>>();
                (pick(ObjectClass::Word), pick(ObjectClass::Char))
            }
            Backend::GroundTruth => {
                let gt = gt.ok_or_else(|| missing(line_crop))?;
                let (ox, oy) = (f64::from(origin.0), f64::from(origin.1));
                let local = |boxes: &[BBox]| {
                    let inside: Vec<BBox> = boxes
                        .iter()
                        .filter(|b| {
                            let (cx, cy) = b.center();
                            line_box.contains_point(cx, cy)
                        })
                        .map(|b| b.translate(-ox, -oy))
                        .collect();
                    inside
                };
                (
                    replay(&local(&gt.words), ObjectClass::Word, line_crop.width(), line_crop.height()),
                    replay(&local(&gt.chars), ObjectClass::Char, line_crop.width(), line_crop.height()),
                )
            }
        };
        if no_words {
            words.clear();
        }
        Ok((words, chars))
    }
}

fn missing(img: &ImageCrop) -> DetectionError {
    let id = img
        .provenance
        .as_ref()
        .and_then(|p| p.page_id.clone())
        .unwrap_or_else(|| "page".to_string());
    DetectionError::MissingAnnotation(id)
}

// Annotations pass through with confidence 1; only boxes that leave the
// image are clipped (and dropped when nothing remains).
fn replay(boxes: &[BBox], class: ObjectClass, w: u32, h: u32) -> Vec<DetectedObject> {
    boxes
        .iter()
        .filter_map(|b| clip(b, w, h).ok())
        .map(|b| DetectedObject::new(b, class, 1.0).expect("confidence 1 is valid"))
        .collect()
}

/// Splits a `N × (5 + C)` (optionally with a leading batch of 1) output into
/// rows.
pub fn parse_rows(shape: &[usize], data: &[f32], num_classes: usize) -> Result<Vec<RawDetection>, DetectionError> {
    let width = 5 + num_classes;
    let dims: Vec<usize> = match shape {
        [1, n, c] => vec![*n, *c],
        [n, c] => vec![*n, *c],
        _ => {
            return Err(DetectionError::Inference(format!(
                "expected detector output N×{width}, got shape {shape:?}"
            )))
        }
    };
    if dims[1] != width {
        return Err(DetectionError::Inference(format!(
            "detector rows have {} values, expected {width} for {num_classes} classes",
            dims[1]
        )));
    }
    Ok(data
        .chunks_exact(width)
        .map(|r| RawDetection {
            cx: r[0],
            cy: r[1],
            w: r[2],
            h: r[3],
            objectness: r[4],
            class_scores: r[5..].to_vec(),
        })
        .collect())
}
