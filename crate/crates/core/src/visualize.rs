//! Side-by-side rendering of a page and its transcription.
//!
//! Left half: the page with line, word and character boxes outlined in
//! blue, green and red. Right half: each token's text drawn inside its box
//! on white.

use std::path::Path;

use ::image::{Rgb, RgbImage};

use crate::assembly::PageTranscription;
use crate::geometry::BBox;
use crate::image::{unit_to_luma8, ImageCrop, ImageError};
use crate::render::FontFace;

pub const LINE_COLOR: Rgb<u8> = Rgb([0, 90, 255]);
pub const WORD_COLOR: Rgb<u8> = Rgb([0, 170, 0]);
pub const CHAR_COLOR: Rgb<u8> = Rgb([230, 0, 0]);

/// Text is drawn with this fraction of the box left blank on each side.
const TEXT_MARGIN: f32 = 0.05;

/// Outlines `bbox`, clipped to the first `page_w` columns.
fn outline(img: &mut RgbImage, bbox: &BBox, page_w: u32, color: Rgb<u8>) {
    let (w, h) = (i64::from(page_w), i64::from(img.height()));
    let (x0, y0, x1, y1) = bbox.pixel_rect();
    let (x0, y0) = (x0.max(0), y0.max(0));
    let (x1, y1) = ((x1 - 1).min(w - 1), (y1 - 1).min(h - 1));
    if x0 > x1 || y0 > y1 {
        return;
    }
    let mut put = |x: i64, y: i64| img.put_pixel(x as u32, y as u32, color);
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn draw_text(img: &mut RgbImage, font: &FontFace, text: &str, bbox: &BBox, x_off: u32, page_w: u32) {
    let (x0, y0, x1, y1) = bbox.pixel_rect();
    let (x0, y0) = (x0.max(0), y0.max(0));
    let (x1, y1) = (x1.min(i64::from(page_w)), y1.min(i64::from(img.height())));
    if x1 <= x0 || y1 <= y0 || text.trim().is_empty() {
        return;
    }
    let (bw, bh) = ((x1 - x0) as u32, (y1 - y0) as u32);
    // Glyphs the font lacks are drawn as nothing rather than failing the page.
    let drawable: String = text.chars().filter(|&c| c.is_whitespace() || font.has_glyph(c)).collect();
    let Ok(tile) = crate::render::render_fitted(font, &drawable, bw, bh, TEXT_MARGIN) else {
        return;
    };
    for ty in 0..bh {
        for tx in 0..bw {
            let v = unit_to_luma8(tile.get(tx, ty));
            let (px, py) = (x_off + x0 as u32 + tx, y0 as u32 + ty);
            let cur = img.get_pixel(px, py).0[0];
            let v = v.min(cur);
            img.put_pixel(px, py, Rgb([v, v, v]));
        }
    }
}

/// Builds the `2W × H` composite.
pub fn compose(page: &ImageCrop, transcription: &PageTranscription, font: &FontFace) -> RgbImage {
    let (w, h) = (page.width(), page.height());
    let mut img = RgbImage::from_pixel(2 * w, h, Rgb([255, 255, 255]));
    for y in 0..h {
        for x in 0..w {
            let v = unit_to_luma8(page.get(x, y));
            img.put_pixel(x, y, Rgb([v, v, v]));
        }
    }
    for line in &transcription.lines {
        for t in &line.tokens {
            if t.chars.is_empty() {
                draw_text(&mut img, font, &t.text, &t.bbox, w, w);
            } else {
                for c in &t.chars {
                    draw_text(&mut img, font, &c.text, &c.bbox, w, w);
                }
            }
        }
    }
    for line in &transcription.lines {
        outline(&mut img, &line.bbox, w, LINE_COLOR);
        for t in &line.tokens {
            let color = if t.is_char { CHAR_COLOR } else { WORD_COLOR };
            outline(&mut img, &t.bbox, w, color);
            for c in &t.chars {
                outline(&mut img, &c.bbox, w, CHAR_COLOR);
            }
        }
    }
    img
}

/// Writes the composite as a PNG.
pub fn visualize(
    page: &ImageCrop,
    transcription: &PageTranscription,
    font: &FontFace,
    out_path: &Path,
) -> Result<(), ImageError> {
    compose(page, transcription, font)
        .save_with_format(out_path, ::image::ImageFormat::Png)
        .map_err(|source| ImageError::Write {
            path: out_path.display().to_string(),
            source,
        })
}
