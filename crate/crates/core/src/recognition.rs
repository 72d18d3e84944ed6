//! Retrieval-based recognition of word and character crops.
//!
//! A word crop is matched against the word index; when its best similarity
//! is below the fallback threshold the word is read character by character
//! from the localizer's char boxes inside it instead.

use std::cmp::Ordering;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::Orientation;
use crate::encoder::{Encoder, EncoderError};
use crate::geometry::{iou, BBox, DetectedObject};
use crate::image::{ImageCrop, ImageError};
use crate::index::{ExemplarIndex, IndexError};

/// Emitted for characters nothing in the index resembles.
pub const UNREADABLE_MARKER: &str = "□";

pub const DEFAULT_FALLBACK_THRESHOLD: f32 = 0.82;
pub const DEFAULT_UNREADABLE_THRESHOLD: f32 = 0.05;

#[derive(Debug, Error)]
pub enum RecognitionError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid recognition config: {0}")]
    InvalidConfig(String),
}

fn default_threshold() -> f32 {
    DEFAULT_FALLBACK_THRESHOLD
}
fn default_unreadable() -> f32 {
    DEFAULT_UNREADABLE_THRESHOLD
}
fn default_k() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// Recognition settings as written in a pipeline config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognitionConfig {
    /// Word matches below this cosine similarity fall back to characters.
    #[serde(default = "default_threshold")]
    pub word_fallback_threshold: f32,
    /// Word index file; absent means character-only recognition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_index: Option<PathBuf>,
    pub char_index: PathBuf,
    #[serde(default = "default_true")]
    pub insert_spaces: bool,
    /// Neighbors retrieved per query; the top one is used.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Characters whose best similarity is below this become
    /// [`UNREADABLE_MARKER`].
    #[serde(default = "default_unreadable")]
    pub unreadable_threshold: f32,
}

/// Numeric recognition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognitionParams {
    pub word_fallback_threshold: f32,
    pub k: usize,
    pub unreadable_threshold: f32,
}

impl Default for RecognitionParams {
    fn default() -> Self {
        Self {
            word_fallback_threshold: DEFAULT_FALLBACK_THRESHOLD,
            k: 1,
            unreadable_threshold: DEFAULT_UNREADABLE_THRESHOLD,
        }
    }
}

impl From<&RecognitionConfig> for RecognitionParams {
    fn from(c: &RecognitionConfig) -> Self {
        Self {
            word_fallback_threshold: c.word_fallback_threshold,
            k: c.k,
            unreadable_threshold: c.unreadable_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    WordMatch,
    CharFallback,
    CharOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharToken {
    pub text: String,
    pub bbox: BBox,
    pub similarity: f32,
}

/// A recognized word, or a lone character outside every word box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizedToken {
    pub text: String,
    pub bbox: BBox,
    pub source: TokenSource,
    /// Top-1 similarity of the deciding query; for character paths, the
    /// weakest character.
    pub similarity: f32,
    /// Set when the token was emitted without a confident match, e.g. a
    /// word below threshold with no characters to fall back on.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_confidence: bool,
    /// True for characters that belong to no word.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_char: bool,
    /// Per-character results when the word was read character by character.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chars: Vec<CharToken>,
}

impl RecognizedToken {
    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let mut t = self.clone();
        t.bbox = t.bbox.translate(dx, dy);
        for c in &mut t.chars {
            c.bbox = c.bbox.translate(dx, dy);
        }
        t
    }
}

/// Reading-order comparison of two boxes in the same frame.
pub fn reading_cmp(a: &BBox, b: &BBox, orientation: Orientation) -> Ordering {
    let (primary, secondary) = match orientation {
        Orientation::Horizontal => ((a.x0(), b.x0()), (a.y0(), b.y0())),
        Orientation::Vertical => ((a.y0(), b.y0()), (a.x0(), b.x0())),
    };
    primary
        .0
        .total_cmp(&primary.1)
        .then(secondary.0.total_cmp(&secondary.1))
        .then(a.x1().total_cmp(&b.x1()))
        .then(a.y1().total_cmp(&b.y1()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharAssignment {
    /// For each word, indices into `chars` in reading order.
    pub per_word: Vec<Vec<usize>>,
    /// Characters inside no word, in reading order.
    pub orphans: Vec<usize>,
}

/// Assigns each character to the word containing its center. When several
/// words contain it, the one with the highest IoU against the character wins
/// (lower word index on ties).
pub fn assign_chars(words: &[BBox], chars: &[BBox], orientation: Orientation) -> CharAssignment {
    let mut per_word = vec![Vec::new(); words.len()];
    let mut orphans = Vec::new();
    for (ci, c) in chars.iter().enumerate() {
        let (cx, cy) = c.center();
        let best = words
            .iter()
            .enumerate()
            .filter(|(_, w)| w.contains_point(cx, cy))
            .map(|(wi, w)| (wi, iou(w, c)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        match best {
            Some((wi, _)) => per_word[wi].push(ci),
            None => orphans.push(ci),
        }
    }
    let order = |v: &mut Vec<usize>| v.sort_by(|&a, &b| reading_cmp(&chars[a], &chars[b], orientation).then(a.cmp(&b)));
    per_word.iter_mut().for_each(order);
    order(&mut orphans);
    CharAssignment { per_word, orphans }
}

/// An index together with the encoder that built it.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub index: Arc<ExemplarIndex>,
    pub encoder: Arc<Encoder>,
}

impl Retriever {
    pub fn new(index: Arc<ExemplarIndex>, encoder: Arc<Encoder>) -> Result<Self, RecognitionError> {
        index.ensure_encoder(&encoder)?;
        Ok(Self { index, encoder })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordReading {
    pub text: String,
    pub source: TokenSource,
    pub similarity: f32,
    pub low_confidence: bool,
    /// `(label, similarity)` per character on the character paths.
    pub chars: Vec<(String, f32)>,
}

#[derive(Debug, Clone)]
pub struct Recognizer {
    params: RecognitionParams,
    word: Option<Retriever>,
    chars: Retriever,
}

impl Recognizer {
    pub fn new(params: RecognitionParams, word: Option<Retriever>, chars: Retriever) -> Result<Self, RecognitionError> {
        if params.k == 0 {
            return Err(RecognitionError::InvalidConfig("k must be at least 1".into()));
        }
        if params.word_fallback_threshold.is_nan() {
            return Err(RecognitionError::InvalidConfig("word_fallback_threshold is NaN".into()));
        }
        Ok(Self { params, word, chars })
    }

    pub fn params(&self) -> &RecognitionParams {
        &self.params
    }

    pub fn with_threshold(&self, threshold: f32) -> Self {
        let mut r = self.clone();
        r.params.word_fallback_threshold = threshold;
        r
    }

    pub fn has_word_index(&self) -> bool {
        self.word.is_some()
    }

    fn read_chars(&self, crops: &[ImageCrop]) -> Result<Vec<(String, f32)>, RecognitionError> {
        let embs = self.chars.encoder.embed_batch(crops)?;
        embs.iter()
            .map(|e| {
                let top = self.chars.index.query_labels(e, self.params.k)?.swap_remove(0);
                if top.similarity < self.params.unreadable_threshold {
                    Ok((UNREADABLE_MARKER.to_string(), top.similarity))
                } else {
                    Ok((top.label, top.similarity))
                }
            })
            .collect()
    }

    fn word_top1(&self, crops: &[ImageCrop]) -> Result<Vec<(String, f32)>, RecognitionError> {
        let word = self.word.as_ref().expect("caller checked word index");
        let embs = word.encoder.embed_batch(crops)?;
        embs.iter()
            .map(|e| {
                let top = word.index.query_labels(e, self.params.k)?.swap_remove(0);
                Ok((top.label, top.similarity))
            })
            .collect()
    }

    fn decide(&self, word_top: Option<(String, f32)>, chars: Vec<(String, f32)>) -> WordReading {
        let weakest = chars.iter().map(|c| c.1).fold(f32::INFINITY, f32::min);
        let joined: String = chars.iter().map(|c| c.0.as_str()).collect();
        match word_top {
            Some((label, sim)) if sim >= self.params.word_fallback_threshold => WordReading {
                text: label,
                source: TokenSource::WordMatch,
                similarity: sim,
                low_confidence: false,
                chars: Vec::new(),
            },
            Some((label, sim)) if chars.is_empty() => WordReading {
                text: label,
                source: TokenSource::WordMatch,
                similarity: sim,
                low_confidence: true,
                chars: Vec::new(),
            },
            Some(_) => WordReading {
                text: joined,
                source: TokenSource::CharFallback,
                similarity: weakest,
                low_confidence: false,
                chars,
            },
            None if chars.is_empty() => WordReading {
                text: UNREADABLE_MARKER.to_string(),
                source: TokenSource::CharOnly,
                similarity: 0.0,
                low_confidence: true,
                chars: Vec::new(),
            },
            None => WordReading {
                text: joined,
                source: TokenSource::CharOnly,
                similarity: weakest,
                low_confidence: false,
                chars,
            },
        }
    }

    /// Reads one word. `char_crops` are the word's characters in reading
    /// order and are only embedded when the word path does not decide.
    pub fn recognize_word(&self, crop: &ImageCrop, char_crops: &[ImageCrop]) -> Result<WordReading, RecognitionError> {
        let word_top = match self.word {
            Some(_) => Some(self.word_top1(std::slice::from_ref(crop))?.swap_remove(0)),
            None => None,
        };
        let decided = word_top
            .as_ref()
            .is_some_and(|(_, s)| *s >= self.params.word_fallback_threshold);
        let chars = if decided { Vec::new() } else { self.read_chars(char_crops)? };
        Ok(self.decide(word_top, chars))
    }

    /// Recognizes every word and orphan character of a line. Boxes are in
    /// the line crop's frame; tokens come back in reading order.
    pub fn recognize_line(
        &self,
        line: &ImageCrop,
        words: &[DetectedObject],
        chars: &[DetectedObject],
        orientation: Orientation,
    ) -> Result<Vec<RecognizedToken>, RecognitionError> {
        let word_boxes: Vec<BBox> = words.iter().map(|d| d.bbox).collect();
        let char_boxes: Vec<BBox> = chars.iter().map(|d| d.bbox).collect();
        let assignment = assign_chars(&word_boxes, &char_boxes, orientation);

        let crop_of = |b: &BBox| line.crop(b).map(|(c, _)| c);

        let word_tops: Vec<Option<(String, f32)>> = if self.word.is_some() && !word_boxes.is_empty() {
            let crops = word_boxes.iter().map(crop_of).collect::<Result<Vec<_>, _>>()?;
            self.word_top1(&crops)?.into_iter().map(Some).collect()
        } else {
            vec![None; word_boxes.len()]
        };

        // Characters that need reading: those of undecided words, plus orphans.
        let mut needed: Vec<usize> = Vec::new();
        for (wi, top) in word_tops.iter().enumerate() {
            let decided = top
                .as_ref()
                .is_some_and(|(_, s)| *s >= self.params.word_fallback_threshold);
            if !decided {
                needed.extend(&assignment.per_word[wi]);
            }
        }
        needed.extend(&assignment.orphans);
        let crops = needed
            .iter()
            .map(|&ci| crop_of(&char_boxes[ci]))
            .collect::<Result<Vec<_>, _>>()?;
        let readings = if crops.is_empty() { Vec::new() } else { self.read_chars(&crops)? };
        let mut char_reading: Vec<Option<(String, f32)>> = vec![None; char_boxes.len()];
        for (ci, r) in needed.into_iter().zip(readings) {
            char_reading[ci] = Some(r);
        }

        let mut tokens = Vec::with_capacity(word_boxes.len() + assignment.orphans.len());
        for (wi, top) in word_tops.into_iter().enumerate() {
            let members = &assignment.per_word[wi];
            let chars: Vec<(String, f32)> = members.iter().filter_map(|&ci| char_reading[ci].clone()).collect();
            let reading = self.decide(top, chars);
            let char_tokens = if reading.chars.is_empty() {
                Vec::new()
            } else {
                members
                    .iter()
                    .zip(&reading.chars)
                    .map(|(&ci, (text, sim))| CharToken {
                        text: text.clone(),
                        bbox: char_boxes[ci],
                        similarity: *sim,
                    })
                    .collect()
            };
            tokens.push(RecognizedToken {
                text: reading.text,
                bbox: word_boxes[wi],
                source: reading.source,
                similarity: reading.similarity,
                low_confidence: reading.low_confidence,
                is_char: false,
                chars: char_tokens,
            });
        }
        for &ci in &assignment.orphans {
            let (text, sim) = char_reading[ci].clone().expect("orphans are always read");
            tokens.push(RecognizedToken {
                text,
                bbox: char_boxes[ci],
                source: TokenSource::CharOnly,
                similarity: sim,
                low_confidence: false,
                is_char: true,
                chars: Vec::new(),
            });
        }
        tokens.sort_by(|a, b| reading_cmp(&a.bbox, &b.bbox, orientation).then_with(|| a.text.cmp(&b.text)));
        Ok(tokens)
    }
}

/// A labeled crop and the wrong labels retrieval ranked near it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HardNegative {
    pub gold: String,
    pub confused: Vec<String>,
}

/// Retrieves the top `k` exemplars for each labeled crop and keeps the
/// labels that differ from gold, first occurrence only, in rank order.
pub fn export_hard_negatives(
    labeled: &[(ImageCrop, String)],
    index: &ExemplarIndex,
    encoder: &Encoder,
    k: usize,
) -> Result<Vec<HardNegative>, RecognitionError> {
    index.ensure_encoder(encoder)?;
    let crops: Vec<ImageCrop> = labeled.iter().map(|(c, _)| c.clone()).collect();
    let embs = encoder.embed_batch(&crops)?;
    let mut out = Vec::with_capacity(labeled.len());
    for ((_, gold), e) in labeled.iter().zip(&embs) {
        let mut confused: Vec<String> = Vec::new();
        for n in index.query(e, k)? {
            if n.label != *gold && !confused.contains(&n.label) {
                confused.push(n.label);
            }
        }
        out.push(HardNegative {
            gold: gold.clone(),
            confused,
        });
    }
    Ok(out)
}

/// Writes `gold<TAB>l1,l2,…` lines.
pub fn write_hard_negatives<W: Write>(mut w: W, records: &[HardNegative]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}\t{}", r.gold, r.confused.join(","))?;
    }
    Ok(())
}
