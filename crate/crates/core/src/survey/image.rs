use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GSSL";
const HEADER_LEN: usize = 16;

/// Row-major `H × W × C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl AsRef<Image> for Image {
    fn as_ref(&self) -> &Image {
        self
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Invalid(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Encodes as a `GSSL` blob: magic, `u32` H, W, C, then little-endian `f32` pixels.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err("missing GSSL header".into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let expected = HEADER_LEN + 4 * h * w * c;
        if bytes.len() != expected {
            return Err(format!(
                "payload has {} bytes, expected {expected} for {h}x{w}x{c}",
                bytes.len()
            ));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(h, w, c, data).map_err(|e| e.to_string())
    }

    pub fn write_blob(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_blob()).map_err(|e| Error::io(path, e))
    }

    pub fn read_blob(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_blob(&bytes).map_err(|message| Error::Payload {
            reference: path.display().to_string(),
            message,
        })
    }

    /// Channel-first copy (`C × H × W`) as `f64`, the layout the encoder consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        let hw = self.height * self.width;
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + p] = v as f64;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32 / 11.0).collect();
        let img = Image::new(2, 3, 2, data).unwrap();
        let blob = img.to_blob();
        assert_eq!(&blob[..4], b"GSSL");
        assert_eq!(blob.len(), 16 + 4 * 12);
        assert_eq!(Image::from_blob(&blob).unwrap(), img);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let img = Image::filled(2, 2, 1, 0.5);
        let blob = img.to_blob();
        assert!(Image::from_blob(&blob[..blob.len() - 1]).is_err());
        assert!(Image::from_blob(b"NOPE").is_err());
    }

    #[test]
    fn chw_layout() {
        let img = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let chw = img.to_chw();
        assert_eq!(chw.len(), 4);
        assert!((chw[0] - 0.1).abs() < 1e-7 && (chw[1] - 0.3).abs() < 1e-7);
        assert!((chw[2] - 0.2).abs() < 1e-7 && (chw[3] - 0.4).abs() < 1e-7);
    }
}
