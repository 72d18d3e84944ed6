//! Retrieval-based OCR.
//!
//! Text is localized with object detection (lines, then words and
//! characters inside each line) and every crop is recognized by embedding it
//! and looking up its nearest neighbor in an index of exemplars rendered from
//! digital fonts. Word crops fall back to per-character recognition when the
//! best word match is below a cosine similarity threshold.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: boxes, IoU, non-maximum suppression
//! * [`image`]: grayscale crops and resampling
//! * [`render`]: font rasterization of exemplars and synthetic text
//! * [`encoder`]: crop → unit-norm embedding
//! * [`index`]: the exemplar index and its on-disk format
//! * [`detection`]: decoding detector output, ground-truth detection
//! * [`recognition`]: word/char retrieval with fallback
//! * [`assembly`]: reading order and text assembly
//! * [`pipeline`]: the multi-threaded engine
//! * [`eval`]: edit distance, CER/WER, dataset runs
//! * [`coco`], [`export`], [`visualize`]: I/O
//! * [`synth`]: synthetic pages for tests and benchmarks

pub mod assembly;
pub mod coco;
pub mod detection;
pub mod encoder;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod image;
pub mod index;
mod onnx;
pub mod pipeline;
pub mod recognition;
pub mod render;
pub mod synth;
pub mod visualize;

pub use assembly::{Orientation, PageTranscription};
pub use encoder::{Embedding, Encoder, EncoderSpec};
pub use geometry::{BBox, DetectedObject, ObjectClass};
pub use image::ImageCrop;
pub use index::ExemplarIndex;
pub use pipeline::{Engine, ImageJob, JobResult, PipelineConfig};

/// Environment variable naming the default directory for relative model and
/// index paths in configuration files.
pub const MODEL_DIR_ENV: &str = "EFFOCR_MODEL_DIR";
