//! Binary-to-image conversion.
//!
//! A byteplot lays the bytes of a file out row-major at a fixed width, one
//! byte per pixel, 0 rendered black and 255 white. DEX files additionally get
//! per-section RGB coloring: the gray value of each byte is routed to exactly
//! one channel chosen by the section containing its offset (header/ids and
//! unclaimed bytes to red, class definitions to green, data to blue), so
//! summing the channels recovers the grayscale plot exactly. Conversion ends
//! with a Lanczos-3 resample to a canonical square.
//!
//! Pixels are `[0.0, 1.0]` reals throughout; quantization to 8-bit happens
//! only at the PNG boundary.

use std::path::Path;

use crate::dexparse::{parse_dex_header, DexSectionMap, SectionClass};
use crate::error::{Error, Result};

/// Dense pixel grid, stored as one row-major plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ByteImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// `channels * height * width` values in `[0.0, 1.0]`, plane-major.
    pub pixels: Vec<f64>,
    /// Opaque provenance tag (usually the source file name).
    pub source_id: String,
}

impl ByteImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<ByteImage> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Geometry {
                expected: "width, height >= 1 and channels in {1, 3}".into(),
                got: format!("{width}x{height}x{channels}"),
            });
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Geometry {
                expected: format!("{} pixel values", width * height * channels),
                got: format!("{}", pixels.len()),
            });
        }
        Ok(ByteImage {
            width,
            height,
            channels,
            pixels,
            source_id: String::new(),
        })
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> ByteImage {
        self.source_id = id.into();
        self
    }

    /// One channel plane, row-major.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[c * self.width * self.height + y * self.width + x]
    }
}

/// Mode for the RGB-encoding phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    Grayscale,
    DexSections,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConversionConfig {
    /// Byteplot row width in bytes/pixels.
    pub fixed_width: usize,
    /// Side of the square output image.
    pub canonical_size: usize,
    pub color_mode: ColorMode,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        ConversionConfig {
            fixed_width: 256,
            canonical_size: 256,
            color_mode: ColorMode::DexSections,
        }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_width == 0 || self.canonical_size == 0 {
            return Err(Error::Config(
                "fixed_width and canonical_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Bytes to a grayscale plot at `cfg.fixed_width`, one byte per pixel,
/// `byte / 255` as the gray level. The ragged final row is zero-padded.
pub fn bytes_to_grayscale(raw: &[u8], cfg: &ConversionConfig) -> Result<ByteImage> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let width = cfg.fixed_width;
    let height = raw.len().div_ceil(width);
    let mut pixels = vec![0.0; width * height];
    for (i, &b) in raw.iter().enumerate() {
        pixels[i] = f64::from(b) / 255.0;
    }
    ByteImage::new(width, height, 1, pixels)
}

/// Bytes to a 3-channel plot at the original (pre-resize) resolution, the
/// gray value of each byte placed on the channel of its section.
pub fn encode_rgb(raw: &[u8], map: &DexSectionMap, cfg: &ConversionConfig) -> Result<ByteImage> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    if map.total_size != raw.len() {
        return Err(Error::Geometry {
            expected: format!("section map covering {} bytes", raw.len()),
            got: format!("{}", map.total_size),
        });
    }
    let width = cfg.fixed_width;
    let height = raw.len().div_ceil(width);
    let plane = width * height;
    let mut pixels = vec![0.0; 3 * plane];
    for range in &map.ranges {
        let channel = match range.section {
            SectionClass::Header | SectionClass::Ids | SectionClass::Unsegmented => 0,
            SectionClass::ClassDefs => 1,
            SectionClass::Data => 2,
        };
        for i in range.start..range.end {
            pixels[channel * plane + i] = f64::from(raw[i]) / 255.0;
        }
    }
    ByteImage::new(width, height, 3, pixels)
}

/// Collapses a section-colored image back to grayscale:
/// `gray = clip(R + G + B, 0, 1)`.
pub fn decode_to_grayscale(img: &ByteImage) -> Result<ByteImage> {
    if img.channels != 3 {
        return Err(Error::Geometry {
            expected: "3-channel image".into(),
            got: format!("{} channels", img.channels),
        });
    }
    let n = img.width * img.height;
    let pixels = (0..n)
        .map(|i| (img.pixels[i] + img.pixels[n + i] + img.pixels[2 * n + i]).clamp(0.0, 1.0))
        .collect();
    ByteImage::new(img.width, img.height, 1, pixels)
        .map(|out| out.with_source_id(img.source_id.clone()))
}

/// Lanczos kernel, 3 lobes: `sinc(x) * sinc(x/3)` for `|x| < 3`, else 0.
/// Values within 1e-12 of an integer are snapped so that resampling onto an
/// identical grid reduces to an exact delta.
fn lanczos3(x: f64) -> f64 {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-12 {
        return if nearest == 0.0 { 1.0 } else { 0.0 };
    }
    if x.abs() >= 3.0 {
        return 0.0;
    }
    let px = std::f64::consts::PI * x;
    3.0 * px.sin() * (px / 3.0).sin() / (px * px)
}

/// Per-output-pixel sampling window along one axis: first source index and
/// the normalized weights (summing to 1).
fn axis_weights(in_len: usize, out_len: usize) -> Vec<(isize, Vec<f64>)> {
    let ratio = in_len as f64 / out_len as f64;
    let scale = ratio.max(1.0);
    let radius = 3.0 * scale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - radius).ceil() as isize;
            let hi = (center + radius).floor() as isize;
            let mut weights: Vec<f64> = (lo..=hi)
                .map(|i| lanczos3((i as f64 - center) / scale))
                .collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            (lo, weights)
        })
        .collect()
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Separable Lanczos-3 resampling of every channel. Source coordinates are
/// clamped at the edges and the final values are clipped to `[0, 1]`
/// (intermediate horizontal-pass values are left unclipped so that the
/// separable result matches a direct 2-D convolution).
pub fn lanczos_resize(img: &ByteImage, out_w: usize, out_h: usize) -> Result<ByteImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Geometry {
            expected: "output dimensions >= 1".into(),
            got: format!("{out_w}x{out_h}"),
        });
    }
    let horiz = axis_weights(img.width, out_w);
    let vert = axis_weights(img.height, out_h);

    let mut pixels = Vec::with_capacity(img.channels * out_w * out_h);
    for c in 0..img.channels {
        let plane = img.plane(c);

        // Horizontal pass: [height, width] -> [height, out_w]
        let mut mid = vec![0.0; img.height * out_w];
        for y in 0..img.height {
            let row = &plane[y * img.width..(y + 1) * img.width];
            for (ox, (lo, weights)) in horiz.iter().enumerate() {
                let mut acc = 0.0;
                for (k, w) in weights.iter().enumerate() {
                    acc += w * row[clamp_index(lo + k as isize, img.width)];
                }
                mid[y * out_w + ox] = acc;
            }
        }

        // Vertical pass: [height, out_w] -> [out_h, out_w]
        for (lo, weights) in &vert {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for (k, w) in weights.iter().enumerate() {
                    acc += w * mid[clamp_index(lo + k as isize, img.height) * out_w + ox];
                }
                pixels.push(acc.clamp(0.0, 1.0));
            }
        }
    }
    ByteImage::new(out_w, out_h, img.channels, pixels)
        .map(|out| out.with_source_id(img.source_id.clone()))
}

/// Converts raw file bytes: section parse (in `DexSections` mode), byteplot,
/// then Lanczos resample to `canonical_size`². Pure function of the bytes
/// and config.
pub fn convert_bytes(raw: &[u8], cfg: &ConversionConfig) -> Result<ByteImage> {
    cfg.validate()?;
    let plot = match cfg.color_mode {
        ColorMode::Grayscale => bytes_to_grayscale(raw, cfg)?,
        ColorMode::DexSections => {
            let map = parse_dex_header(raw)?;
            encode_rgb(raw, &map, cfg)?
        }
    };
    lanczos_resize(&plot, cfg.canonical_size, cfg.canonical_size)
}

/// [`convert_bytes`] over a file, tagging the result with the file name.
pub fn convert_file(path: &Path, cfg: &ConversionConfig) -> Result<ByteImage> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(convert_bytes(&raw, cfg)?.with_source_id(name))
}

/// Writes an 8-bit PNG (grayscale or RGB); quantization is `round(v * 255)`.
pub fn save_png(img: &ByteImage, path: &Path) -> Result<()> {
    let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    let result = match img.channels {
        1 => {
            let buf: Vec<u8> = img.plane(0).iter().map(|&v| quant(v)).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer sized from image")
                .save(path)
        }
        _ => {
            let n = img.width * img.height;
            let mut buf = Vec::with_capacity(n * 3);
            for i in 0..n {
                for c in 0..3 {
                    buf.push(quant(img.pixels[c * n + i]));
                }
            }
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer sized from image")
                .save(path)
        }
    };
    result.map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// Reads a PNG back into planar `[0, 1]` floats (grayscale stays 1-channel,
/// everything else converts to RGB).
pub fn load_png(path: &Path) -> Result<ByteImage> {
    let dynimg = image::open(path).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let img = match dynimg {
        image::DynamicImage::ImageLuma8(gray) => {
            let pixels = gray.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
            ByteImage::new(w, h, 1, pixels)?
        }
        other => {
            let rgb = other.to_rgb8();
            let n = w * h;
            let mut pixels = vec![0.0; 3 * n];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    pixels[c * n + i] = f64::from(p.0[c]) / 255.0;
                }
            }
            ByteImage::new(w, h, 3, pixels)?
        }
    };
    Ok(img.with_source_id(name))
}
