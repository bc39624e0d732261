//! Dense float images and the small amount of file I/O the pipeline needs.
//!
//! Pixels are stored interleaved, row-major: `data[(y * width + x) * channels + c]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const F32_DUMP_MAGIC: &[u8; 4] = b"F32I";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Mean over channels, producing a single-channel image.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let inv = 1.0 / self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Replicates a single-channel image into `channels` channels.
    pub fn replicate(&self, channels: usize) -> Image {
        assert_eq!(self.channels, 1, "replicate expects a single-channel image");
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes an 8-bit image. The format follows the extension (`.png`, `.pgm`, `.ppm`).
    pub fn save_8bit(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer size matches")
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer size matches")
                .save(path)?,
            c => {
                return Err(Error::Shape(format!(
                    "cannot write {c}-channel image as 8-bit"
                )))
            }
        }
        Ok(())
    }

    /// Loads an 8-bit grayscale (or RGB, converted by channel mean) image into [0, 1].
    pub fn load_gray(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, 1, data)
    }

    /// Raw dump: magic `F32I`, then width, height, channels as u32 LE, then f32 LE samples.
    pub fn encode_f32(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(F32_DUMP_MAGIC);
        for d in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode_f32(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                what: "f32 image header",
                needed: 16,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != F32_DUMP_MAGIC {
            return Err(Error::BadMagic {
                expected: *F32_DUMP_MAGIC,
                found: magic,
            });
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (dim(0), dim(1), dim(2));
        let needed = 16 + w * h * c * 4;
        if bytes.len() < needed {
            return Err(Error::Truncated {
                what: "f32 image payload",
                needed,
                available: bytes.len(),
            });
        }
        let data = bytes[16..needed]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Image::from_vec(w, h, c, data)
    }

    pub fn save_f32(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_f32())
    }

    pub fn load_f32(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_f32(&bytes)
    }
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luminance_is_channel_mean() {
        let img = Image::from_vec(1, 1, 3, vec![0.3, 0.6, 0.9]).unwrap();
        assert!((img.luminance().data[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn f32_dump_round_trip() {
        let img = Image::from_vec(2, 3, 1, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let back = Image::decode_f32(&img.encode_f32()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn f32_dump_rejects_truncation() {
        let img = Image::new(4, 4, 1);
        let bytes = img.encode_f32();
        assert!(matches!(
            Image::decode_f32(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }
}
