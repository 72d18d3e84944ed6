//! Grayscale image crops.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image must have positive width and height, got {width}x{height}")]
    Empty { width: u32, height: u32 },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f32),
    #[error("crop {0} does not intersect the image")]
    OutOfBounds(BBox),
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
}

/// Where a crop came from on its page.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub page_id: Option<String>,
    pub line: Option<usize>,
    pub word: Option<usize>,
    pub char: Option<usize>,
}

/// Grayscale image, row-major, values in `[0, 1]` (0 = black, 1 = white).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCrop {
    pixels: Vec<f32>,
    width: u32,
    height: u32,
    pub provenance: Option<Provenance>,
}

/// ITU BT.601 luminance weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

impl ImageCrop {
    pub fn new(width: u32, height: u32, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::BufferSize {
                expected,
                got: pixels.len(),
            });
        }
        if let Some(&bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ImageError::PixelRange(bad));
        }
        Ok(Self {
            pixels,
            width,
            height,
            provenance: None,
        })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    /// 8-bit gray levels, `v / 255`.
    pub fn from_luma8(width: u32, height: u32, data: &[u8]) -> Result<Self, ImageError> {
        Self::new(width, height, data.iter().map(|&v| luma8_to_unit(v)).collect())
    }

    pub fn from_dynamic(img: &::image::DynamicImage) -> Result<Self, ImageError> {
        use ::image::DynamicImage;
        match img {
            DynamicImage::ImageLuma8(g) => Self::from_luma8(g.width(), g.height(), g.as_raw()),
            other => {
                let rgb = other.to_rgb8();
                let px = rgb
                    .pixels()
                    .map(|p| {
                        let l = LUMA[0] * f32::from(p[0])
                            + LUMA[1] * f32::from(p[1])
                            + LUMA[2] * f32::from(p[2]);
                        (l / 255.0).clamp(0.0, 1.0)
                    })
                    .collect();
                Self::new(rgb.width(), rgb.height(), px)
            }
        }
    }

    pub fn open(path: &Path) -> Result<Self, ImageError> {
        let img = ::image::open(path).map_err(|source| ImageError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_dynamic(&img)
    }

    pub fn to_luma8(&self) -> ::image::GrayImage {
        let data = self.pixels.iter().map(|&v| unit_to_luma8(v)).collect();
        ::image::GrayImage::from_raw(self.width, self.height, data)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_luma8()
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| ImageError::Write {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Cuts out the pixels covered by `bbox` (rounded outward), clamped to
    /// the image. Returns the crop and its integer origin in this image.
    pub fn crop(&self, bbox: &BBox) -> Result<(ImageCrop, (u32, u32)), ImageError> {
        let (x0, y0, x1, y1) = bbox.pixel_rect();
        let x0 = x0.clamp(0, i64::from(self.width)) as u32;
        let y0 = y0.clamp(0, i64::from(self.height)) as u32;
        let x1 = x1.clamp(0, i64::from(self.width)) as u32;
        let y1 = y1.clamp(0, i64::from(self.height)) as u32;
        if x0 >= x1 || y0 >= y1 {
            return Err(ImageError::OutOfBounds(*bbox));
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut out = Vec::with_capacity(w as usize * h as usize);
        for y in y0..y1 {
            let row = y as usize * self.width as usize;
            out.extend_from_slice(&self.pixels[row + x0 as usize..row + x1 as usize]);
        }
        Ok((
            ImageCrop {
                pixels: out,
                width: w,
                height: h,
                provenance: self.provenance.clone(),
            },
            (x0, y0),
        ))
    }

    /// Copies `src` into this image with its top-left corner at `(x, y)`;
    /// parts falling outside are dropped.
    pub fn paste(&mut self, src: &ImageCrop, x: u32, y: u32) {
        for sy in 0..src.height {
            let ty = y + sy;
            if ty >= self.height {
                break;
            }
            for sx in 0..src.width {
                let tx = x + sx;
                if tx >= self.width {
                    break;
                }
                self.set(tx, ty, src.get(sx, sy));
            }
        }
    }

    /// Pads to the aspect ratio `target_w : target_h` with `fill`, keeping the
    /// content centered (odd remainders go right/bottom).
    pub fn pad_to_aspect(&self, target_w: u32, target_h: u32, fill: f32) -> ImageCrop {
        let (w, h) = (u64::from(self.width), u64::from(self.height));
        let (tw, th) = (u64::from(target_w), u64::from(target_h));
        // Smallest canvas with the target aspect that holds the image.
        let (cw, ch) = if w * th >= h * tw {
            (w, (w * th).div_ceil(tw))
        } else {
            ((h * tw).div_ceil(th), h)
        };
        if cw == w && ch == h {
            return self.clone();
        }
        let mut out = ImageCrop {
            pixels: vec![fill; (cw * ch) as usize],
            width: cw as u32,
            height: ch as u32,
            provenance: self.provenance.clone(),
        };
        out.paste(self, ((cw - w) / 2) as u32, ((ch - h) / 2) as u32);
        out
    }

    /// Bilinear resize with half-pixel centers. Same-size resizes are exact
    /// copies.
    pub fn resize_bilinear(&self, out_w: u32, out_h: u32) -> ImageCrop {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / out_w as f32;
        let sy = self.height as f32 / out_h as f32;
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        let mut out = Vec::with_capacity(out_w as usize * out_h as usize);
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as u32;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as u32;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let top = self.get(x0, y0) * (1.0 - wx) + self.get(x1, y0) * wx;
                let bot = self.get(x0, y1) * (1.0 - wx) + self.get(x1, y1) * wx;
                out.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
            }
        }
        ImageCrop {
            pixels: out,
            width: out_w,
            height: out_h,
            provenance: self.provenance.clone(),
        }
    }
}

#[inline]
pub(crate) fn luma8_to_unit(v: u8) -> f32 {
    f32::from(v) / 255.0
}

#[inline]
pub(crate) fn unit_to_luma8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
