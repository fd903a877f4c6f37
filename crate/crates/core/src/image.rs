//! RGB images with components in `[0, 1]`, plus PNG I/O.

use std::fmt;
use std::path::Path;

use thiserror::Error;

pub type Rgb = [f32; 3];

pub const BLACK: Rgb = [0.0, 0.0, 0.0];
pub const WHITE: Rgb = [1.0, 1.0, 1.0];
pub const GRAY: Rgb = [0.5, 0.5, 0.5];
pub const RED: Rgb = [1.0, 0.0, 0.0];
pub const GREEN: Rgb = [0.0, 1.0, 0.0];
pub const BLUE: Rgb = [0.0, 0.0, 1.0];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("component {value} at pixel ({x}, {y}) is outside [0, 1]")]
    OutOfRange { x: usize, y: usize, value: f32 },
    #[error("pixel buffer has {len} values, expected {expected}")]
    BufferLength { len: usize, expected: usize },
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: ::image::ImageError,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        source: ::image::ImageError,
    },
}

/// An RGB image stored row-major with interleaved channels.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        let expected = width * height * 3;
        if pixels.len() != expected {
            return Err(ImageError::BufferLength {
                len: pixels.len(),
                expected,
            });
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            let p = i / 3;
            return Err(ImageError::OutOfRange {
                x: p % width,
                y: p / width,
                value: pixels[i],
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let color = clamp_rgb(color);
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Builds an image from a per-pixel function; results are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&clamp_rgb(f(x, y)));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, color: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&clamp_rgb(color));
    }

    pub fn map(&self, f: impl Fn(Rgb) -> Rgb) -> Self {
        Self::from_fn(self.width, self.height, |x, y| f(self.get(x, y)))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = ::image::open(path)
            .map_err(|source| ImageError::Read {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            pixels,
        })
    }

    /// Writes an 8-bit PNG, rounding each component to the nearest level.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| quantize(v)).collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction")
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|source| ImageError::Write {
                path: path.display().to_string(),
                source,
            })
    }

    /// The image as it would read back from an 8-bit PNG.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&v| f32::from(quantize(v)) / 255.0)
                .collect(),
        }
    }
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mean = if self.pixels.is_empty() {
            0.0
        } else {
            self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
        };
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("mean", &mean)
            .finish_non_exhaustive()
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn clamp_rgb(c: Rgb) -> Rgb {
    c.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
}

/// Writes a single-channel 8-bit PNG from values already in `[0, 1]`.
pub fn save_gray_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    values: &[f32],
) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    ::image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or(ImageError::BufferLength {
            len: values.len(),
            expected: width * height,
        })?
        .save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|source| ImageError::Write {
            path: path.display().to_string(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let err = Image::new(2, 1, vec![0.0, 0.0, 0.0, 0.0, 1.5, 0.0]).unwrap_err();
        assert!(matches!(err, ImageError::OutOfRange { x: 1, y: 0, .. }));
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(5, 3, |x, y| [x as f32 / 4.0, y as f32 / 2.0, 0.3]);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }
}
