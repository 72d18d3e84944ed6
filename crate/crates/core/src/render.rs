//! Font rasterization for exemplar and synthetic text.

use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontArc, GlyphId, OutlinedGlyph, PxScale, Rect, ScaleFont};
use thiserror::Error;

use crate::image::{luma8_to_unit, ImageCrop};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("cannot load font {path}: {reason}")]
    FontLoad { path: String, reason: String },
    #[error("font {font_id} has no glyph for {ch:?} (U+{:04X})", *ch as u32)]
    MissingGlyph { font_id: String, ch: char },
    #[error("canvas must be at least {MIN_CANVAS} pixels, got {0}")]
    InvalidCanvas(u32),
    #[error("cannot render empty text")]
    EmptyText,
}

pub const MIN_CANVAS: u32 = 16;

/// Fraction of the canvas left empty on each side of an exemplar.
pub const EXEMPLAR_MARGIN: f32 = 0.1;

// Layout scale used to measure ink extents before fitting.
const MEASURE_SCALE: f32 = 256.0;

/// A loaded font plus the identifier recorded in index entries.
#[derive(Clone)]
pub struct FontFace {
    id: String,
    font: FontArc,
}

impl std::fmt::Debug for FontFace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FontFace").field("id", &self.id).finish()
    }
}

impl FontFace {
    /// Loads a TrueType/OpenType file; the font id is the file stem.
    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let bytes = std::fs::read(path).map_err(|e| RenderError::FontLoad {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Self::from_bytes(id, bytes).map_err(|e| match e {
            RenderError::FontLoad { reason, .. } => RenderError::FontLoad {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_bytes(id: impl Into<String>, bytes: Vec<u8>) -> Result<Self, RenderError> {
        let id = id.into();
        let font = FontArc::try_from_vec(bytes).map_err(|e| RenderError::FontLoad {
            path: id.clone(),
            reason: e.to_string(),
        })?;
        Ok(Self { id, font })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn has_glyph(&self, ch: char) -> bool {
        self.font.glyph_id(ch) != GlyphId(0)
    }

    /// Fails with the first codepoint of `text` the font cannot draw.
    /// Whitespace is always accepted.
    pub fn check_coverage(&self, text: &str) -> Result<(), RenderError> {
        match text
            .chars()
            .find(|&c| !c.is_whitespace() && !self.has_glyph(c))
        {
            Some(ch) => Err(RenderError::MissingGlyph {
                font_id: self.id.clone(),
                ch,
            }),
            None => Ok(()),
        }
    }

    fn layout(&self, text: &str, scale: f32, dx: f32, dy: f32) -> Vec<OutlinedGlyph> {
        let scaled = self.font.as_scaled(PxScale::from(scale));
        let mut caret = point(dx, dy + scaled.ascent());
        let mut prev: Option<GlyphId> = None;
        let mut out = Vec::new();
        for ch in text.chars() {
            let id = self.font.glyph_id(ch);
            if let Some(p) = prev {
                caret.x += scaled.kern(p, id);
            }
            let glyph = id.with_scale_and_position(scale, caret);
            caret.x += scaled.h_advance(id);
            prev = Some(id);
            if let Some(og) = self.font.outline_glyph(glyph) {
                out.push(og);
            }
        }
        out
    }
}

fn ink_bounds(glyphs: &[OutlinedGlyph]) -> Option<Rect> {
    glyphs.iter().map(|g| g.px_bounds()).reduce(|a, b| Rect {
        min: point(a.min.x.min(b.min.x), a.min.y.min(b.min.y)),
        max: point(a.max.x.max(b.max.x), a.max.y.max(b.max.y)),
    })
}

/// Renders `text` black on white, scaled to fit `width × height` with
/// `margin` (a fraction of each dimension) left empty on every side, and
/// centered. Output pixels are 8-bit gray levels.
pub fn render_fitted(
    font: &FontFace,
    text: &str,
    width: u32,
    height: u32,
    margin: f32,
) -> Result<ImageCrop, RenderError> {
    if text.is_empty() {
        return Err(RenderError::EmptyText);
    }
    font.check_coverage(text)?;
    let mut coverage = vec![0.0f32; width as usize * height as usize];

    let measured = font.layout(text, MEASURE_SCALE, 0.0, 0.0);
    if let Some(r) = ink_bounds(&measured) {
        let avail_w = width as f32 * (1.0 - 2.0 * margin);
        let avail_h = height as f32 * (1.0 - 2.0 * margin);
        let fit = (avail_w / r.width()).min(avail_h / r.height());
        let scale = MEASURE_SCALE * fit;

        let placed = font.layout(text, scale, 0.0, 0.0);
        let r = ink_bounds(&placed).expect("same text has ink at any scale");
        let dx = width as f32 / 2.0 - (r.min.x + r.max.x) / 2.0;
        let dy = height as f32 / 2.0 - (r.min.y + r.max.y) / 2.0;

        for g in font.layout(text, scale, dx, dy) {
            let b = g.px_bounds();
            g.draw(|x, y, c| {
                let px = b.min.x as i64 + i64::from(x);
                let py = b.min.y as i64 + i64::from(y);
                if px >= 0 && py >= 0 && px < i64::from(width) && py < i64::from(height) {
                    let slot = &mut coverage[py as usize * width as usize + px as usize];
                    *slot = (*slot + c).min(1.0);
                }
            });
        }
    }

    let gray: Vec<u8> = coverage
        .iter()
        .map(|c| ((1.0 - c) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(ImageCrop::new(
        width,
        height,
        gray.into_iter().map(luma8_to_unit).collect(),
    )
    .expect("canvas dimensions are positive"))
}

/// Square `canvas × canvas` exemplar render of a character or word.
pub fn render_exemplar(font: &FontFace, text: &str, canvas: u32) -> Result<ImageCrop, RenderError> {
    if canvas < MIN_CANVAS {
        return Err(RenderError::InvalidCanvas(canvas));
    }
    render_fitted(font, text, canvas, canvas, EXEMPLAR_MARGIN)
}

/// Font files (`.ttf`, `.otf`, `.ttc`) directly inside `dir`, sorted by path.
pub fn fonts_in_dir(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("ttf" | "otf" | "ttc")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
