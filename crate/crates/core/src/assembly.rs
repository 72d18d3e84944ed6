//! Reading order and text assembly for horizontal and vertical writing.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::recognition::{reading_cmp, RecognizedToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Lines top to bottom, characters left to right.
    #[default]
    Horizontal,
    /// Columns right to left, characters top to bottom.
    Vertical,
}

/// Lines whose centers differ by at most this fraction of the mean line
/// thickness are treated as one visual row (or column).
pub const SAME_ROW_BAND: f64 = 0.3;

/// Reading order of line boxes, as a permutation of indices.
///
/// Horizontal: by y-center ascending, ties by `x0`. Vertical: by x-center
/// descending (right-to-left columns), ties by `y0`. Lines within the skew
/// band of a row's first line are read across that row.
pub fn order_lines(lines: &[BBox], orientation: Orientation) -> Vec<usize> {
    if lines.is_empty() {
        return Vec::new();
    }
    // (primary center, secondary start), primary already flipped for
    // right-to-left columns so that ascending order is reading order.
    let key = |b: &BBox| match orientation {
        Orientation::Horizontal => (b.center().1, b.x0()),
        Orientation::Vertical => (-b.center().0, b.y0()),
    };
    let thickness = |b: &BBox| match orientation {
        Orientation::Horizontal => b.height(),
        Orientation::Vertical => b.width(),
    };
    let full_cmp = |a: usize, b: usize| {
        let (ka, kb) = (key(&lines[a]), key(&lines[b]));
        ka.0.total_cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(lines[a].x1().total_cmp(&lines[b].x1()))
            .then(lines[a].y1().total_cmp(&lines[b].y1()))
            .then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..lines.len()).collect();
    idx.sort_by(|&a, &b| full_cmp(a, b));

    let mean = lines.iter().map(thickness).sum::<f64>() / lines.len() as f64;
    let band = SAME_ROW_BAND * mean;

    let mut out = Vec::with_capacity(lines.len());
    let mut row: Vec<usize> = Vec::new();
    let mut anchor = f64::NAN;
    for i in idx {
        let c = key(&lines[i]).0;
        if !row.is_empty() && c - anchor > band {
            flush_row(&mut row, &mut out, lines, orientation);
        }
        if row.is_empty() {
            anchor = c;
        }
        row.push(i);
    }
    flush_row(&mut row, &mut out, lines, orientation);
    out
}

fn flush_row(row: &mut Vec<usize>, out: &mut Vec<usize>, lines: &[BBox], orientation: Orientation) {
    row.sort_by(|&a, &b| reading_cmp(&lines[a], &lines[b], orientation).then(a.cmp(&b)));
    out.append(row);
}

/// Joins token texts with a single space, or with nothing.
pub fn compose_line(tokens: &[RecognizedToken], insert_spaces: bool) -> String {
    let sep = if insert_spaces { " " } else { "" };
    tokens
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(sep)
}

/// A line and its tokens, in page coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineTokens {
    pub bbox: BBox,
    pub tokens: Vec<RecognizedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscribedLine {
    pub bbox: BBox,
    pub tokens: Vec<RecognizedToken>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageTranscription {
    pub orientation: Orientation,
    pub lines: Vec<TranscribedLine>,
    pub full_text: String,
}

impl PageTranscription {
    pub fn empty(orientation: Orientation) -> Self {
        Self {
            orientation,
            lines: Vec::new(),
            full_text: String::new(),
        }
    }
}

fn token_cmp(a: &RecognizedToken, b: &RecognizedToken, orientation: Orientation) -> Ordering {
    reading_cmp(&a.bbox, &b.bbox, orientation)
        .then_with(|| a.text.cmp(&b.text))
        .then(a.similarity.total_cmp(&b.similarity))
}

/// Orders lines and their tokens, composes line texts and joins them with
/// newlines. The result does not depend on the input order of lines or
/// tokens.
pub fn assemble(lines: Vec<LineTokens>, orientation: Orientation, insert_spaces: bool) -> PageTranscription {
    let mut lines: Vec<LineTokens> = lines
        .into_iter()
        .map(|mut l| {
            l.tokens.sort_by(|a, b| token_cmp(a, b, orientation));
            l
        })
        .collect();
    // Canonical pre-order so that identical boxes are resolved by content.
    lines.sort_by(|a, b| {
        <[f64; 4]>::from(a.bbox)
            .partial_cmp(&<[f64; 4]>::from(b.bbox))
            .unwrap_or(Ordering::Equal)
            .then_with(|| compose_line(&a.tokens, insert_spaces).cmp(&compose_line(&b.tokens, insert_spaces)))
    });
    let boxes: Vec<BBox> = lines.iter().map(|l| l.bbox).collect();
    let order = order_lines(&boxes, orientation);

    let mut slots: Vec<Option<LineTokens>> = lines.into_iter().map(Some).collect();
    let ordered: Vec<TranscribedLine> = order
        .into_iter()
        .map(|i| {
            let l = slots[i].take().expect("order is a permutation");
            let text = compose_line(&l.tokens, insert_spaces);
            TranscribedLine {
                bbox: l.bbox,
                tokens: l.tokens,
                text,
            }
        })
        .collect();
    let full_text = ordered
        .iter()
        .map(|l| l.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    PageTranscription {
        orientation,
        lines: ordered,
        full_text,
    }
}
