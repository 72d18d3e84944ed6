//! The inference engine: detect lines → localize → embed → retrieve →
//! assemble, over a batch of images on a pool of worker threads.
//!
//! Each image is processed start to finish by one worker. Models and indexes
//! are loaded once and shared read-only; results are put back in input order,
//! so the output does not depend on the number of workers.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicIsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble, LineTokens, Orientation, PageTranscription};
use crate::coco::{parse_coco, CocoDocument};
use crate::detection::{Detector, DetectorKind, DetectorSpec, GroundTruthPage};
use crate::encoder::{Encoder, EncoderSpec};
use crate::image::{ImageCrop, Provenance};
use crate::index::ExemplarIndex;
use crate::recognition::{RecognitionConfig, RecognitionParams, Recognizer, Retriever};
use crate::MODEL_DIR_ENV;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

fn default_workers() -> usize {
    1
}
fn default_queue() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub line_detector: DetectorSpec,
    pub localizer: DetectorSpec,
    /// Encoder for word crops; defaults to `char_encoder`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_encoder: Option<EncoderSpec>,
    pub char_encoder: EncoderSpec,
    pub recognition: RecognitionConfig,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default)]
    pub no_words: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
}

impl PipelineConfig {
    /// Ground-truth detection, stub encoders and a character index.
    pub fn ground_truth(char_index: impl Into<PathBuf>) -> Self {
        Self {
            line_detector: DetectorSpec::ground_truth(),
            localizer: DetectorSpec::ground_truth(),
            word_encoder: None,
            char_encoder: EncoderSpec::stub(),
            recognition: RecognitionConfig {
                word_fallback_threshold: crate::recognition::DEFAULT_FALLBACK_THRESHOLD,
                word_index: None,
                char_index: char_index.into(),
                insert_spaces: true,
                k: 1,
                unreadable_threshold: crate::recognition::DEFAULT_UNREADABLE_THRESHOLD,
            },
            orientation: Orientation::Horizontal,
            no_words: false,
            workers: 1,
            queue_capacity: 4,
        }
    }

    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let mut de = serde_json::Deserializer::from_str(json);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            PipelineError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Reads a config file and resolves its relative paths (see
    /// [`PipelineConfig::resolve_paths`]).
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let json = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&json)?;
        let config_dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(&model_search_dir(config_dir));
        Ok(cfg)
    }

    /// Makes every relative model, index and annotation path absolute
    /// against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in [&mut self.line_detector, &mut self.localizer] {
            d.model_path.as_mut().map(fix);
            d.annotations.as_mut().map(fix);
        }
        for e in [self.word_encoder.as_mut(), Some(&mut self.char_encoder)].into_iter().flatten() {
            e.model_path.as_mut().map(fix);
        }
        fix(&mut self.recognition.char_index);
        self.recognition.word_index.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if self.queue_capacity == 0 {
            return Err(config_err("queue_capacity must be at least 1"));
        }
        if self.orientation == Orientation::Vertical && !self.no_words {
            return Err(config_err("vertical orientation requires no_words"));
        }
        if !(-1.0..=f32::MAX).contains(&self.recognition.word_fallback_threshold) {
            return Err(config_err("word_fallback_threshold must be >= -1"));
        }
        if self.recognition.k == 0 {
            return Err(config_err("recognition.k must be at least 1"));
        }
        self.line_detector.validate().map_err(config_err)?;
        self.localizer.validate().map_err(config_err)?;
        Ok(())
    }
}

/// `$EFFOCR_MODEL_DIR` when set, otherwise `fallback`.
pub fn model_search_dir(fallback: &Path) -> PathBuf {
    match std::env::var_os(MODEL_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => fallback.to_path_buf(),
    }
}

/// One image to transcribe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageJob {
    pub image_id: String,
    pub image_path: PathBuf,
    /// Per-image annotations for ground-truth detectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coco_path: Option<PathBuf>,
}

impl ImageJob {
    /// Job whose id is the file stem.
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        let image_path = path.into();
        let image_id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| image_path.display().to_string());
        Self {
            image_id,
            image_path,
            coco_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub load_ms: f64,
    pub detect_ms: f64,
    pub localize_ms: f64,
    pub recognize_ms: f64,
    pub assemble_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn add(&mut self, o: &StageTimings) {
        self.load_ms += o.load_ms;
        self.detect_ms += o.detect_ms;
        self.localize_ms += o.localize_ms;
        self.recognize_ms += o.recognize_ms;
        self.assemble_ms += o.assemble_ms;
        self.total_ms += o.total_ms;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageResult {
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub transcription: PageTranscription,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Ok(PageResult),
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub image_id: String,
    #[serde(flatten)]
    pub status: JobStatus,
    pub timings: StageTimings,
}

impl JobResult {
    pub fn page(&self) -> Option<&PageResult> {
        match &self.status {
            JobStatus::Ok(p) => Some(p),
            JobStatus::Failed { .. } => None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.page().is_some()
    }
}

/// Batch-level measurements from [`Engine::infer_with_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct InferStats {
    pub images: usize,
    pub failed: usize,
    pub workers: usize,
    pub wall_ms: f64,
    /// Most images dispatched but not yet finished at any one time.
    pub peak_in_flight: usize,
    /// Per-stage times summed over all images.
    pub stage_totals: StageTimings,
}

pub struct Engine {
    cfg: PipelineConfig,
    line_detector: Detector,
    localizer: Detector,
    recognizer: Recognizer,
    shared_annotations: Option<Arc<CocoDocument>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("cfg", &self.cfg).finish()
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    /// Loads every model and index named by `cfg`. Paths are used as given;
    /// see [`PipelineConfig::from_file`] for resolution.
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let line_detector = Detector::new(cfg.line_detector.clone()).map_err(config_err)?;
        let localizer = Detector::new(cfg.localizer.clone()).map_err(config_err)?;

        let char_encoder = Arc::new(Encoder::new(cfg.char_encoder.clone()).map_err(config_err)?);
        let char_index = ExemplarIndex::load(&cfg.recognition.char_index).map_err(config_err)?;
        let chars = Retriever::new(Arc::new(char_index), char_encoder.clone()).map_err(config_err)?;

        let word = match (&cfg.recognition.word_index, cfg.no_words) {
            (Some(path), false) => {
                let encoder = match &cfg.word_encoder {
                    Some(spec) if *spec != cfg.char_encoder => Arc::new(Encoder::new(spec.clone()).map_err(config_err)?),
                    _ => char_encoder.clone(),
                };
                let index = ExemplarIndex::load(path).map_err(config_err)?;
                Some(Retriever::new(Arc::new(index), encoder).map_err(config_err)?)
            }
            _ => None,
        };
        let recognizer =
            Recognizer::new(RecognitionParams::from(&cfg.recognition), word, chars).map_err(config_err)?;

        let shared_annotations = [&cfg.line_detector, &cfg.localizer]
            .into_iter()
            .find(|d| d.kind == DetectorKind::GroundTruth && d.annotations.is_some())
            .and_then(|d| d.annotations.as_deref())
            .map(|p| parse_coco(p).map(Arc::new))
            .transpose()
            .map_err(config_err)?;

        Ok(Self {
            cfg,
            line_detector,
            localizer,
            recognizer,
            shared_annotations,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn recognizer(&self) -> &Recognizer {
        &self.recognizer
    }

    fn ground_truth_for(&self, job: &ImageJob) -> Result<Option<GroundTruthPage>, String> {
        if !(self.line_detector.is_ground_truth() || self.localizer.is_ground_truth()) {
            return Ok(None);
        }
        let own;
        let doc: &CocoDocument = match &job.coco_path {
            Some(p) => {
                own = parse_coco(p).map_err(|e| e.to_string())?;
                &own
            }
            None => self
                .shared_annotations
                .as_deref()
                .ok_or_else(|| format!("no ground-truth annotations for {}", job.image_id))?,
        };
        let name = job.image_path.to_string_lossy();
        let image = doc
            .find_image(&name)
            .ok_or_else(|| format!("no ground-truth annotations for {}", job.image_id))?;
        Ok(Some(doc.ground_truth(image.id)))
    }

    /// Transcribes one image; errors are reported in the result.
    pub fn process(&self, job: &ImageJob) -> JobResult {
        let mut timings = StageTimings::default();
        let start = Instant::now();
        let status = match self.run_job(job, &mut timings) {
            Ok(page) => JobStatus::Ok(page),
            Err(reason) => JobStatus::Failed { reason },
        };
        timings.total_ms = ms_since(start);
        JobResult {
            image_id: job.image_id.clone(),
            status,
            timings,
        }
    }

    fn run_job(&self, job: &ImageJob, timings: &mut StageTimings) -> Result<PageResult, String> {
        let t = Instant::now();
        let page = ImageCrop::open(&job.image_path)
            .map_err(|e| e.to_string())?
            .with_provenance(Provenance {
                page_id: Some(job.image_id.clone()),
                ..Provenance::default()
            });
        let gt = self.ground_truth_for(job)?;
        timings.load_ms += ms_since(t);

        let t = Instant::now();
        let lines = self
            .line_detector
            .detect_lines(&page, gt.as_ref())
            .map_err(|e| e.to_string())?;
        timings.detect_ms += ms_since(t);

        let orientation = self.cfg.orientation;
        let mut line_tokens = Vec::with_capacity(lines.len());
        for (li, line) in lines.iter().enumerate() {
            let Ok((mut crop, origin)) = page.crop(&line.bbox) else {
                continue;
            };
            crop.provenance = Some(Provenance {
                page_id: Some(job.image_id.clone()),
                line: Some(li),
                ..Provenance::default()
            });

            let t = Instant::now();
            let (words, chars) = self
                .localizer
                .localize(&crop, origin, &line.bbox, gt.as_ref(), self.cfg.no_words)
                .map_err(|e| e.to_string())?;
            timings.localize_ms += ms_since(t);

            let t = Instant::now();
            let tokens = self
                .recognizer
                .recognize_line(&crop, &words, &chars, orientation)
                .map_err(|e| e.to_string())?;
            timings.recognize_ms += ms_since(t);

            let (dx, dy) = (f64::from(origin.0), f64::from(origin.1));
            line_tokens.push(LineTokens {
                bbox: line.bbox,
                tokens: tokens.iter().map(|t| t.translate(dx, dy)).collect(),
            });
        }

        let t = Instant::now();
        let transcription = assemble(line_tokens, orientation, self.cfg.recognition.insert_spaces);
        timings.assemble_ms += ms_since(t);

        Ok(PageResult {
            file_name: job
                .image_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            width: page.width(),
            height: page.height(),
            transcription,
        })
    }

    /// One result per job, in input order. A failing image never stops the
    /// batch.
    pub fn infer(&self, jobs: &[ImageJob]) -> Vec<JobResult> {
        self.infer_with_stats(jobs).0
    }

    pub fn infer_with_stats(&self, jobs: &[ImageJob]) -> (Vec<JobResult>, InferStats) {
        let start = Instant::now();
        let workers = self.cfg.workers.min(jobs.len()).max(1);
        let in_flight = AtomicIsize::new(0);
        let peak = AtomicIsize::new(0);
        let mut slots: Vec<Option<JobResult>> = vec![None; jobs.len()];

        if !jobs.is_empty() {
            let (job_tx, job_rx) = crossbeam_channel::bounded::<(usize, &ImageJob)>(self.cfg.queue_capacity);
            let (res_tx, res_rx) = crossbeam_channel::unbounded::<(usize, JobResult)>();
            std::thread::scope(|s| {
                for _ in 0..workers {
                    let job_rx = job_rx.clone();
                    let res_tx = res_tx.clone();
                    let in_flight = &in_flight;
                    s.spawn(move || {
                        for (i, job) in job_rx {
                            let result = self.process(job);
                            in_flight.fetch_sub(1, Ordering::SeqCst);
                            if res_tx.send((i, result)).is_err() {
                                break;
                            }
                        }
                    });
                }
                drop(job_rx);
                drop(res_tx);
                for item in jobs.iter().enumerate() {
                    if job_tx.send(item).is_err() {
                        break;
                    }
                    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                }
                drop(job_tx);
                for (i, r) in res_rx {
                    slots[i] = Some(r);
                }
            });
        }

        let results: Vec<JobResult> = slots
            .into_iter()
            .zip(jobs)
            .map(|(r, job)| {
                r.unwrap_or_else(|| JobResult {
                    image_id: job.image_id.clone(),
                    status: JobStatus::Failed {
                        reason: "worker exited before finishing this image".into(),
                    },
                    timings: StageTimings::default(),
                })
            })
            .collect();
        let mut stats = InferStats {
            images: results.len(),
            failed: results.iter().filter(|r| !r.is_ok()).count(),
            workers,
            wall_ms: ms_since(start),
            peak_in_flight: peak.load(Ordering::SeqCst).max(0) as usize,
            stage_totals: StageTimings::default(),
        };
        for r in &results {
            stats.stage_totals.add(&r.timings);
        }
        (results, stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let cfg = PipelineConfig::ground_truth("chars.efxi");
        let mut v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&v.to_string()).unwrap(), cfg);
        v["surprise"] = serde_json::json!(1);
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn vertical_requires_no_words() {
        let mut cfg = PipelineConfig::ground_truth("chars.efxi");
        cfg.orientation = Orientation::Vertical;
        assert!(cfg.validate().is_err());
        cfg.no_words = true;
        assert!(cfg.validate().is_ok());
        cfg.workers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut cfg = PipelineConfig::ground_truth("chars.efxi");
        cfg.recognition.word_index = Some("/abs/words.efxi".into());
        cfg.resolve_paths(Path::new("/models"));
        assert_eq!(cfg.recognition.char_index, PathBuf::from("/models/chars.efxi"));
        assert_eq!(cfg.recognition.word_index, Some(PathBuf::from("/abs/words.efxi")));
    }

    #[test]
    fn missing_index_is_config_error() {
        let cfg = PipelineConfig::ground_truth("/nonexistent/chars.efxi");
        assert!(matches!(Engine::new(cfg), Err(PipelineError::Config(_))));
    }

    #[test]
    fn job_id_from_stem() {
        assert_eq!(ImageJob::from_path("a/b/page_01.png").image_id, "page_01");
    }
}
