//! Character and word error rates, and evaluation runs over a manifest.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::pipeline::{Engine, ImageJob, JobResult, JobStatus};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to score")]
    NoRecords,
    #[error("every gold text is empty; CER is undefined")]
    AllGoldEmpty,
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Edit distance between two sequences (unit-cost insert, delete, substitute).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.len() < b.len() {
        return edit_distance(b, a);
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over Unicode code points.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub prediction: String,
    pub gold: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Drop all whitespace before computing CER.
    #[serde(default)]
    pub ignore_whitespace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub image_id: String,
    pub char_edits: usize,
    pub gold_chars: usize,
    pub word_edits: usize,
    pub gold_words: usize,
    /// `None` for an empty gold text.
    pub cer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub record_count: usize,
    /// Records with empty gold text; scored individually but left out of
    /// the totals.
    pub empty_gold_count: usize,
    pub char_edits: usize,
    pub gold_chars: usize,
    pub word_edits: usize,
    pub gold_words: usize,
    pub records: Vec<RecordScore>,
}

fn prepare(s: &str, opts: ScoreOptions) -> Vec<char> {
    let nfc = s.nfc();
    if opts.ignore_whitespace {
        nfc.filter(|c| !c.is_whitespace()).collect()
    } else {
        nfc.collect()
    }
}

pub fn score_record(r: &EvalRecord, opts: ScoreOptions) -> RecordScore {
    let pred = prepare(&r.prediction, opts);
    let gold = prepare(&r.gold, opts);
    let pred_text: String = r.prediction.nfc().collect();
    let gold_text: String = r.gold.nfc().collect();
    let pred_words: Vec<&str> = pred_text.split_whitespace().collect();
    let gold_words: Vec<&str> = gold_text.split_whitespace().collect();
    let char_edits = edit_distance(&pred, &gold);
    RecordScore {
        image_id: r.image_id.clone(),
        char_edits,
        gold_chars: gold.len(),
        word_edits: edit_distance(&pred_words, &gold_words),
        gold_words: gold_words.len(),
        cer: (!gold.is_empty()).then(|| char_edits as f64 / gold.len() as f64),
    }
}

/// Micro-averaged CER and WER: summed edits over summed gold lengths.
/// Both strings are NFC-normalized first. When no gold words remain, WER
/// is 0 if there were no word edits and 1 otherwise.
pub fn cer(records: &[EvalRecord], opts: ScoreOptions) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let scores: Vec<RecordScore> = records.iter().map(|r| score_record(r, opts)).collect();
    let scored = || scores.iter().filter(|s| s.gold_chars > 0);
    let gold_chars: usize = scored().map(|s| s.gold_chars).sum();
    if gold_chars == 0 {
        return Err(EvalError::AllGoldEmpty);
    }
    let char_edits: usize = scored().map(|s| s.char_edits).sum();
    let word_edits: usize = scored().map(|s| s.word_edits).sum();
    let gold_words: usize = scored().map(|s| s.gold_words).sum();
    let wer = if gold_words > 0 {
        word_edits as f64 / gold_words as f64
    } else {
        f64::from(u8::from(word_edits > 0))
    };
    Ok(EvalReport {
        cer: char_edits as f64 / gold_chars as f64,
        wer,
        record_count: scores.len(),
        empty_gold_count: scores.len() - scored().count(),
        char_edits,
        gold_chars,
        word_edits,
        gold_words,
        records: scores,
    })
}

/// One manifest line: an image, its gold text and optional box annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub gold_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coco_path: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn job(&self) -> ImageJob {
        ImageJob {
            image_id: self.image_id.clone(),
            image_path: self.image_path.clone(),
            coco_path: self.coco_path.clone(),
        }
    }
}

/// Reads a manifest; relative paths are taken from the manifest's
/// directory. Every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, EvalError> {
    let json = std::fs::read_to_string(path).map_err(|e| EvalError::Manifest(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&json);
    let mut entries: Vec<ManifestEntry> = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let at = e.path().to_string();
        EvalError::Manifest(format!("{}: {at}: {}", path.display(), e.into_inner()))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.image_path.is_relative() {
            e.image_path = base.join(&e.image_path);
        }
        if let Some(c) = e.coco_path.as_mut().filter(|c| c.is_relative()) {
            *c = base.join(&*c);
        }
    }
    check_manifest(&entries)?;
    Ok(entries)
}

pub fn check_manifest(entries: &[ManifestEntry]) -> Result<(), EvalError> {
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if !seen.insert(&e.image_id) {
            return Err(EvalError::Manifest(format!("duplicate image_id {:?}", e.image_id)));
        }
        if !e.image_path.is_file() {
            return Err(EvalError::Manifest(format!(
                "image {} for {:?} does not exist",
                e.image_path.display(),
                e.image_id
            )));
        }
        if let Some(c) = e.coco_path.as_ref().filter(|c| !c.is_file()) {
            return Err(EvalError::Manifest(format!(
                "annotations {} for {:?} do not exist",
                c.display(),
                e.image_id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedImage {
    pub image_id: String,
    pub reason: String,
}

/// Outcome of [`eval_run`]. Images that failed inference are listed in
/// `failures` and left out of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRun {
    pub report: EvalReport,
    pub failures: Vec<FailedImage>,
    #[serde(skip)]
    pub results: Vec<JobResult>,
}

/// Transcribes every manifest image and scores it against its gold text.
pub fn eval_run(entries: &[ManifestEntry], engine: &Engine, opts: ScoreOptions) -> Result<EvalRun, EvalError> {
    if entries.is_empty() {
        return Err(EvalError::NoRecords);
    }
    check_manifest(entries)?;
    let jobs: Vec<ImageJob> = entries.iter().map(ManifestEntry::job).collect();
    let results = engine.infer(&jobs);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (entry, result) in entries.iter().zip(&results) {
        match &result.status {
            JobStatus::Ok(page) => records.push(EvalRecord {
                image_id: entry.image_id.clone(),
                prediction: page.transcription.full_text.clone(),
                gold: entry.gold_text.clone(),
            }),
            JobStatus::Failed { reason } => failures.push(FailedImage {
                image_id: entry.image_id.clone(),
                reason: reason.clone(),
            }),
        }
    }
    let report = cer(&records, opts)?;
    Ok(EvalRun {
        report,
        failures,
        results,
    })
}

fn tsv_field(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n").replace('\r', "\\r")
}

/// Writes `report.json` and a per-record `records.tsv` into `dir`.
pub fn write_eval_outputs(run: &EvalRun, entries: &[ManifestEntry], dir: &Path) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;

    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(run).expect("reports always serialize");
    std::fs::write(&report_path, json + "\n").map_err(io(&report_path))?;

    let tsv_path = dir.join("records.tsv");
    let mut out = String::from("image_id\tstatus\tchar_edits\tgold_chars\tcer\tprediction\tgold\n");
    let mut scores = run.report.records.iter();
    for (entry, result) in entries.iter().zip(&run.results) {
        let gold = tsv_field(&entry.gold_text);
        match &result.status {
            JobStatus::Ok(page) => {
                let s = scores.next().expect("one score per successful image");
                let cer = s.cer.map(|c| format!("{c:.6}")).unwrap_or_default();
                out += &format!(
                    "{}\tok\t{}\t{}\t{}\t{}\t{}\n",
                    tsv_field(&entry.image_id),
                    s.char_edits,
                    s.gold_chars,
                    cer,
                    tsv_field(&page.transcription.full_text),
                    gold
                );
            }
            JobStatus::Failed { .. } => {
                out += &format!("{}\tfailed\t\t\t\t\t{}\n", tsv_field(&entry.image_id), gold);
            }
        }
    }
    let mut f = std::fs::File::create(&tsv_path).map_err(io(&tsv_path))?;
    f.write_all(out.as_bytes()).map_err(io(&tsv_path))?;
    Ok(())
}
