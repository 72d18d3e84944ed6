//! Synthetic pages with known text and exact boxes.
//!
//! Each character is drawn as its own `cell × cell` exemplar tile, and tiles
//! are laid edge to edge. The ground-truth character boxes are the tiles
//! themselves, so a character crop taken from the page is pixel-identical to
//! the exemplar rendered from the same font.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::Orientation;
use crate::coco::{category, category_id, CocoAnnotation, CocoDocument, CocoImage};
use crate::encoder::{Encoder, EncoderSpec};
use crate::eval::ManifestEntry;
use crate::geometry::{BBox, ObjectClass};
use crate::image::{ImageCrop, ImageError};
use crate::index::{alphanumeric_labels, build_index_with_faces, ExemplarIndex, IndexError};
use crate::pipeline::PipelineConfig;
use crate::render::{render_exemplar, FontFace, RenderError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic layout: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub pages: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_word_len: usize,
    /// Side of one character tile; also the exemplar canvas.
    pub cell: u32,
    /// White border around the text block.
    pub margin: u32,
    pub seed: u64,
    pub orientation: Orientation,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pages: 50,
            min_lines: 5,
            max_lines: 10,
            min_words: 1,
            max_words: 4,
            max_word_len: 6,
            cell: 24,
            margin: 12,
            seed: 0,
            orientation: Orientation::Horizontal,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.min_lines == 0 || self.min_lines > self.max_lines {
            return bad("need 1 <= min_lines <= max_lines");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if self.max_word_len == 0 {
            return bad("max_word_len must be positive");
        }
        if self.cell < crate::render::MIN_CANVAS {
            return bad("cell is below the minimum exemplar canvas");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWord {
    pub text: String,
    pub bbox: BBox,
    pub chars: Vec<(String, BBox)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthLine {
    pub bbox: BBox,
    pub words: Vec<SynthWord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPage {
    pub image: ImageCrop,
    pub lines: Vec<SynthLine>,
    /// Words joined by spaces and lines by newlines; vertical columns are
    /// written without spaces, rightmost column first.
    pub gold: String,
    pub orientation: Orientation,
}

impl SynthPage {
    /// Single-image COCO document with line, word and char annotations.
    pub fn to_coco(&self, file_name: &str) -> CocoDocument {
        let mut doc = CocoDocument {
            images: vec![CocoImage {
                id: 1,
                file_name: file_name.to_string(),
                width: self.image.width(),
                height: self.image.height(),
            }],
            annotations: Vec::new(),
            categories: ObjectClass::ALL.into_iter().map(category).collect(),
        };
        let mut push = |class: ObjectClass, bbox: &BBox, text: &str| {
            let id = doc.annotations.len() as u64 + 1;
            doc.annotations.push(CocoAnnotation {
                id,
                image_id: 1,
                bbox: bbox.to_xywh(),
                category_id: category_id(class),
                text: Some(text.to_string()),
                area: Some(bbox.area()),
                iscrowd: Some(0),
            });
        };
        let sep = match self.orientation {
            Orientation::Horizontal => " ",
            Orientation::Vertical => "",
        };
        for line in &self.lines {
            let text: Vec<&str> = line.words.iter().map(|w| w.text.as_str()).collect();
            push(ObjectClass::Line, &line.bbox, &text.join(sep));
            for w in &line.words {
                push(ObjectClass::Word, &w.bbox, &w.text);
                for (c, b) in &w.chars {
                    push(ObjectClass::Char, b, c);
                }
            }
        }
        doc
    }
}

/// Lays out random words from `alphabet` into pages.
pub fn generate_pages(font: &FontFace, alphabet: &[String], spec: &SynthSpec) -> Result<Vec<SynthPage>, SynthError> {
    spec.validate()?;
    if alphabet.is_empty() {
        return Err(SynthError::InvalidSpec("alphabet is empty".into()));
    }
    let mut tiles: HashMap<&str, ImageCrop> = HashMap::new();
    for label in alphabet {
        tiles.insert(label, render_exemplar(font, label, spec.cell)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.pages)
        .map(|_| {
            let n_lines = rng.gen_range(spec.min_lines..=spec.max_lines);
            let text: Vec<Vec<Vec<&str>>> = (0..n_lines)
                .map(|_| {
                    let n_words = rng.gen_range(spec.min_words..=spec.max_words);
                    (0..n_words)
                        .map(|_| {
                            let len = rng.gen_range(1..=spec.max_word_len);
                            (0..len)
                                .map(|_| alphabet[rng.gen_range(0..alphabet.len())].as_str())
                                .collect()
                        })
                        .collect()
                })
                .collect();
            Ok(layout(&text, &tiles, spec))
        })
        .collect()
}

fn layout(text: &[Vec<Vec<&str>>], tiles: &HashMap<&str, ImageCrop>, spec: &SynthSpec) -> SynthPage {
    let cell = spec.cell;
    let gap = cell / 2;
    let m = spec.margin;
    let vertical = spec.orientation == Orientation::Vertical;
    // Length of each line in cells; horizontal lines leave one blank cell
    // between words.
    let line_cells: Vec<u32> = text
        .iter()
        .map(|words| {
            let chars: usize = words.iter().map(Vec::len).sum();
            let spaces = if vertical { 0 } else { words.len() - 1 };
            (chars + spaces) as u32
        })
        .collect();
    let longest = line_cells.iter().copied().max().unwrap_or(1);
    let n = text.len() as u32;
    let across = n * cell + n.saturating_sub(1) * gap;
    let (width, height) = if vertical {
        (2 * m + across, 2 * m + longest * cell)
    } else {
        (2 * m + longest * cell, 2 * m + across)
    };
    let mut image = ImageCrop::filled(width, height, 1.0).expect("page size is positive");

    let mut lines = Vec::with_capacity(text.len());
    for (li, words) in text.iter().enumerate() {
        let li = li as u32;
        // Origin of the line's first cell; vertical columns run right to left.
        let (lx, ly) = if vertical {
            (width - m - cell - li * (cell + gap), m)
        } else {
            (m, m + li * (cell + gap))
        };
        let mut pos = 0u32;
        let mut out_words = Vec::with_capacity(words.len());
        for word in words {
            let mut chars = Vec::with_capacity(word.len());
            for &ch in word {
                let (x, y) = if vertical { (lx, ly + pos * cell) } else { (lx + pos * cell, ly) };
                image.paste(&tiles[ch], x, y);
                let b = BBox::new(f64::from(x), f64::from(y), f64::from(x + cell), f64::from(y + cell))
                    .expect("tiles have positive size");
                chars.push((ch.to_string(), b));
                pos += 1;
            }
            let bbox = chars.iter().skip(1).fold(chars[0].1, |acc, c| acc.union(&c.1));
            out_words.push(SynthWord {
                text: word.concat(),
                bbox,
                chars,
            });
            if !vertical {
                pos += 1;
            }
        }
        let bbox = out_words.iter().skip(1).fold(out_words[0].bbox, |acc, w| acc.union(&w.bbox));
        lines.push(SynthLine { bbox, words: out_words });
    }

    let sep = if vertical { "" } else { " " };
    let gold = lines
        .iter()
        .map(|l| l.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(sep))
        .collect::<Vec<_>>()
        .join("\n");
    SynthPage {
        image,
        lines,
        gold,
        orientation: spec.orientation,
    }
}

/// Labels from `labels` that the index can tell apart: every label that
/// shares a bit-identical embedding with another label is dropped.
pub fn distinguishable_labels(index: &ExemplarIndex, labels: &[String]) -> Vec<String> {
    let clashing: BTreeSet<String> = index.identical_label_groups().into_iter().flatten().collect();
    let present: BTreeSet<&str> = index.entries().iter().map(|e| e.label.as_str()).collect();
    labels
        .iter()
        .filter(|l| present.contains(l.as_str()) && !clashing.contains(*l))
        .cloned()
        .collect()
}

/// Files written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthDataset {
    pub dir: PathBuf,
    pub manifest_path: PathBuf,
    pub config_path: PathBuf,
    pub index_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Labels used on the pages.
    pub alphabet: Vec<String>,
}

pub const INDEX_FILE: &str = "chars.efxi";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Writes a complete evaluation set into `dir`: page images, per-page COCO
/// boxes, a manifest, a stub-encoder character index over the font's
/// alphanumerics, and a ground-truth pipeline config.
pub fn write_dataset(dir: &Path, font_path: &Path, spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let pages_dir = dir.join("pages");
    std::fs::create_dir_all(&pages_dir).map_err(io(&pages_dir))?;

    let font = FontFace::load(font_path)?;
    let encoder = Encoder::stub();
    let built = build_index_with_faces(&encoder, &alphanumeric_labels(), std::slice::from_ref(&font), spec.cell)?;
    let index_path = dir.join(INDEX_FILE);
    built.index.save(&index_path)?;
    let alphabet = distinguishable_labels(&built.index, &alphanumeric_labels());

    let pages = generate_pages(&font, &alphabet, spec)?;
    let mut entries = Vec::with_capacity(pages.len());
    for (i, page) in pages.iter().enumerate() {
        let id = format!("page_{i:04}");
        let png = format!("{id}.png");
        let coco = format!("{id}.coco.json");
        page.image.save_png(&pages_dir.join(&png))?;
        let coco_path = pages_dir.join(&coco);
        std::fs::write(&coco_path, page.to_coco(&png).to_json()).map_err(io(&coco_path))?;
        entries.push(ManifestEntry {
            image_id: id,
            image_path: Path::new("pages").join(png),
            gold_text: page.gold.clone(),
            coco_path: Some(Path::new("pages").join(coco)),
        });
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(io(&manifest_path))?;

    let mut cfg = PipelineConfig::ground_truth(INDEX_FILE);
    cfg.char_encoder = EncoderSpec::stub();
    cfg.orientation = spec.orientation;
    if spec.orientation == Orientation::Vertical {
        cfg.no_words = true;
        cfg.recognition.insert_spaces = false;
    }
    let config_path = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(&config_path, json).map_err(io(&config_path))?;

    let entries = entries
        .into_iter()
        .map(|mut e| {
            e.image_path = dir.join(&e.image_path);
            e.coco_path = e.coco_path.map(|c| dir.join(c));
            e
        })
        .collect();
    Ok(SynthDataset {
        dir: dir.to_path_buf(),
        manifest_path,
        config_path,
        index_path,
        entries,
        alphabet,
    })
}

/// `n` random words of 1 to `max_len` labels each.
pub fn random_words(alphabet: &[String], n: usize, max_len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len.max(1));
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())].as_str()).collect()
        })
        .collect()
}
