use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use exocr_core::coco::{labeled_crops, parse_coco};
use exocr_core::encoder::{Encoder, EncoderSpec};
use exocr_core::eval::{eval_run, load_manifest, write_eval_outputs, ManifestEntry, ScoreOptions};
use exocr_core::export::{export_results, ExportSelection};
use exocr_core::geometry::ObjectClass;
use exocr_core::image::ImageCrop;
use exocr_core::index::{alphanumeric_labels, build_index, ExemplarIndex};
use exocr_core::pipeline::{model_search_dir, Engine, ImageJob, JobResult, JobStatus, PipelineConfig};
use exocr_core::recognition::{export_hard_negatives, write_hard_negatives};
use exocr_core::render::{fonts_in_dir, FontFace};
use exocr_core::synth::{write_dataset, SynthSpec};
use exocr_core::visualize::visualize;
use exocr_core::Orientation;

/// Retrieval-based OCR: detect, crop, embed, look up, assemble.
#[derive(Debug, Parser)]
#[command(name = "exocr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render labels in every font of a directory and write an exemplar index.
    BuildIndex(BuildIndexArgs),
    /// Transcribe images and export the results.
    Infer(InferArgs),
    /// Transcribe a manifest and score it against gold text.
    Eval(EvalArgs),
    /// Draw a page next to its transcription.
    Visualize(VisualizeArgs),
    /// List the labels retrieval confuses with each labeled crop.
    HardNegatives(HardNegativesArgs),
    /// Write a synthetic evaluation set (pages, boxes, manifest, index, config).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct BuildIndexArgs {
    /// Directory of .ttf/.otf/.ttc fonts.
    #[arg(long)]
    font_dir: PathBuf,
    /// Output index file.
    #[arg(long)]
    out: PathBuf,
    /// Label file, one label per line; defaults to 0-9A-Za-z.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Encoder description (JSON); defaults to the built-in stub.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Exemplar canvas side in pixels.
    #[arg(long, default_value_t = 32)]
    canvas: u32,
}

/// Settings that override the config file.
#[derive(Debug, Args)]
struct Overrides {
    /// Pipeline config (JSON). Relative paths resolve against
    /// $EFFOCR_MODEL_DIR, else the config's directory.
    #[arg(long)]
    config: PathBuf,
    /// Vertical text: columns right to left, no word level.
    #[arg(long)]
    vertical: bool,
    /// Skip word detection and recognize characters only.
    #[arg(long)]
    no_words: bool,
    /// NMS overlap threshold for both detectors
    #[arg(long)]
    iou_thresh: Option<f32>,
    /// Minimum detection confidence for both detectors
    #[arg(long)]
    conf_thresh: Option<f32>,
    /// Images processed concurrently
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::from_file(&self.config)?;
        if self.vertical {
            cfg.orientation = Orientation::Vertical;
            cfg.no_words = true;
        }
        if self.no_words {
            cfg.no_words = true;
        }
        for d in [&mut cfg.line_detector, &mut cfg.localizer] {
            if let Some(t) = self.iou_thresh {
                d.iou_thresh = t;
            }
            if let Some(t) = self.conf_thresh {
                d.conf_thresh = t;
            }
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn engine(&self) -> Result<Engine> {
        Ok(Engine::new(self.config()?)?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Level {
    Line,
    Word,
    Char,
}

impl From<Level> for ObjectClass {
    fn from(l: Level) -> Self {
        match l {
            Level::Line => ObjectClass::Line,
            Level::Word => ObjectClass::Word,
            Level::Char => ObjectClass::Char,
        }
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for exported files.
    #[arg(long)]
    out: PathBuf,
    /// Box levels to export as COCO; all three when omitted.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<Level>>,
    /// Do not write per-image text files.
    #[arg(long)]
    no_text: bool,
    /// Take images (and per-image annotations) from a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Image files.
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for report.json and records.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Leave whitespace out of the character error rate.
    #[arg(long)]
    ignore_whitespace: bool,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Font used to draw recognized text; the first font in --font-dir when
    /// omitted.
    #[arg(long)]
    font: Option<PathBuf>,
    #[arg(long)]
    font_dir: Option<PathBuf>,
    /// Ground-truth annotations for this image.
    #[arg(long)]
    coco: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    image: PathBuf,
}

#[derive(Debug, Args)]
struct HardNegativesArgs {
    /// Pipeline config; its character index and encoder are used.
    #[arg(long)]
    config: PathBuf,
    /// Labeled boxes (COCO with "text" on each annotation).
    #[arg(long)]
    coco: PathBuf,
    /// Directory holding the COCO images; defaults to the COCO file's.
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "char")]
    level: Level,
    /// Neighbors inspected per crop.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Output file, one `gold<TAB>label,label` line per crop.
    #[arg(long)]
    hns_out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    font: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pages: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vertical: bool,
}

/// Outcome of a subcommand: the JSON summary and whether any item failed.
struct Report {
    summary: serde_json::Value,
    item_failures: bool,
}

fn ok(summary: serde_json::Value) -> Result<Report> {
    Ok(Report {
        summary,
        item_failures: false,
    })
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim_end).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn load_encoder_spec(path: &Path) -> Result<EncoderSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec: EncoderSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(p) = spec.model_path.as_mut().filter(|p| p.is_relative()) {
        *p = model_search_dir(path.parent().unwrap_or(Path::new("."))).join(&*p);
    }
    Ok(spec)
}

fn build_index_cmd(a: BuildIndexArgs) -> Result<Report> {
    let encoder = match &a.encoder {
        Some(p) => Encoder::new(load_encoder_spec(p)?)?,
        None => Encoder::stub(),
    };
    let labels = match &a.labels {
        Some(p) => read_labels(p)?,
        None => alphanumeric_labels(),
    };
    let fonts = fonts_in_dir(&a.font_dir).with_context(|| format!("listing {}", a.font_dir.display()))?;
    if fonts.is_empty() {
        bail!("no fonts in {}", a.font_dir.display());
    }
    let built = build_index(&encoder, &labels, &fonts, a.canvas)?;
    built.index.save(&a.out)?;
    ok(json!({
        "index": a.out,
        "entries": built.index.len(),
        "dim": built.index.dim(),
        "fonts": fonts,
        "skipped": built.skipped.iter().map(|s| json!({"label": s.label, "font": s.font_id})).collect::<Vec<_>>(),
        "collisions": built.collisions,
    }))
}

fn job_summary(results: &[JobResult]) -> (serde_json::Value, bool) {
    let failed: Vec<_> = results
        .iter()
        .filter_map(|r| match &r.status {
            JobStatus::Failed { reason } => Some(json!({"image_id": r.image_id, "reason": reason})),
            JobStatus::Ok(_) => None,
        })
        .collect();
    let any = !failed.is_empty();
    (
        json!({
            "images": results.len(),
            "ok": results.len() - failed.len(),
            "failed": failed,
        }),
        any,
    )
}

fn infer_cmd(a: InferArgs) -> Result<Report> {
    let mut jobs: Vec<ImageJob> = match &a.manifest {
        Some(m) => load_manifest(m)?.iter().map(ManifestEntry::job).collect(),
        None => Vec::new(),
    };
    jobs.extend(a.images.iter().map(ImageJob::from_path));
    if jobs.is_empty() {
        bail!("no images given");
    }
    let engine = a.overrides.engine()?;
    let (results, stats) = engine.infer_with_stats(&jobs);
    let sel = ExportSelection {
        levels: match &a.levels {
            Some(l) => l.iter().map(|&l| l.into()).collect(),
            None => ObjectClass::ALL.to_vec(),
        },
        include_assembled_text: !a.no_text,
    };
    let written = if results.iter().any(JobResult::is_ok) {
        export_results(&results, &sel, &a.out)?
    } else {
        Vec::new()
    };
    let (mut summary, failures) = job_summary(&results);
    summary["written"] = json!(written);
    summary["stats"] = serde_json::to_value(stats)?;
    Ok(Report {
        summary,
        item_failures: failures,
    })
}

fn eval_cmd(a: EvalArgs) -> Result<Report> {
    let entries = load_manifest(&a.manifest)?;
    let engine = a.overrides.engine()?;
    let opts = ScoreOptions {
        ignore_whitespace: a.ignore_whitespace,
    };
    let run = eval_run(&entries, &engine, opts)?;
    write_eval_outputs(&run, &entries, &a.out)?;
    let r = &run.report;
    Ok(Report {
        summary: json!({
            "cer": r.cer,
            "wer": r.wer,
            "records": r.record_count,
            "empty_gold": r.empty_gold_count,
            "failed": run.failures,
            "report": a.out.join("report.json"),
        }),
        item_failures: !run.failures.is_empty(),
    })
}

fn visualize_cmd(a: VisualizeArgs) -> Result<Report> {
    let font_path = match (&a.font, &a.font_dir) {
        (Some(f), _) => f.clone(),
        (None, Some(dir)) => fonts_in_dir(dir)?
            .into_iter()
            .next()
            .with_context(|| format!("no fonts in {}", dir.display()))?,
        (None, None) => bail!("one of --font or --font-dir is required"),
    };
    let font = FontFace::load(&font_path)?;
    let engine = a.overrides.engine()?;
    let mut job = ImageJob::from_path(&a.image);
    job.coco_path = a.coco.clone();
    let result = engine.process(&job);
    match &result.status {
        JobStatus::Ok(page) => {
            let image = ImageCrop::open(&a.image)?;
            visualize(&image, &page.transcription, &font, &a.out)?;
            ok(json!({"image_id": result.image_id, "out": a.out, "text": page.transcription.full_text}))
        }
        JobStatus::Failed { reason } => Ok(Report {
            summary: json!({"image_id": result.image_id, "failed": reason}),
            item_failures: true,
        }),
    }
}

fn hard_negatives_cmd(a: HardNegativesArgs) -> Result<Report> {
    let cfg = PipelineConfig::from_file(&a.config)?;
    let encoder = Encoder::new(cfg.char_encoder.clone())?;
    let index = ExemplarIndex::load(&cfg.recognition.char_index)?;
    let doc = parse_coco(&a.coco)?;
    let image_dir = match &a.image_dir {
        Some(d) => d.clone(),
        None => a.coco.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let labeled = labeled_crops(&doc, &image_dir, a.level.into())?;
    let records = export_hard_negatives(&labeled, &index, &encoder, a.k)?;
    let file = std::fs::File::create(&a.hns_out).with_context(|| format!("creating {}", a.hns_out.display()))?;
    write_hard_negatives(std::io::BufWriter::new(file), &records)?;
    let with_confusions = records.iter().filter(|r| !r.confused.is_empty()).count();
    ok(json!({"crops": records.len(), "with_confusions": with_confusions, "out": a.hns_out}))
}

fn synth_cmd(a: SynthArgs) -> Result<Report> {
    let spec = SynthSpec {
        pages: a.pages,
        seed: a.seed,
        orientation: if a.vertical {
            Orientation::Vertical
        } else {
            Orientation::Horizontal
        },
        ..SynthSpec::default()
    };
    let ds = write_dataset(&a.out, &a.font, &spec)?;
    ok(json!({
        "pages": ds.entries.len(),
        "manifest": ds.manifest_path,
        "config": ds.config_path,
        "index": ds.index_path,
        "alphabet": ds.alphabet.concat(),
    }))
}

fn run(cli: Cli) -> Result<Report> {
    match cli.command {
        Command::BuildIndex(a) => build_index_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Visualize(a) => visualize_cmd(a),
        Command::HardNegatives(a) => hard_negatives_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report.summary).expect("summary serializes"));
            if report.item_failures {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
