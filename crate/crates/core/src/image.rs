//! Channel-major raster images with values in `[0, 1]` and PGM/PPM dumps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(32, 32, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::Shape(format!("{} pixels for image shape {shape:?}", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { shape, pixels })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn mirrored(&self) -> Self {
        let ImageShape { height, width, channels } = self.shape;
        let mut out = self.pixels.clone();
        for row in 0..channels * height {
            out[row * width..(row + 1) * width].reverse();
        }
        Self { shape: self.shape, pixels: out }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(self.shape.dims(), self.pixels.iter().map(|&v| T::lit(v as f64)).collect())
    }

    /// Builds an image from a decoder output, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let &[channels, height, width] = t.shape() else {
            return Err(Error::Shape(format!("expected [C, H, W] tensor, got {:?}", t.shape())));
        };
        let pixels = t.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        Ok(Self { shape: ImageShape { height, width, channels }, pixels })
    }

    /// Mean absolute pixel difference.
    pub fn l1(&self, other: &Image) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let sum: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(sum / self.pixels.len() as f64)
    }

    /// Binary PGM (one channel) or PPM (three channels).
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let ImageShape { height, width, channels } = self.shape;
        let magic = match channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Shape(format!("cannot write {c}-channel image as PNM"))),
        };
        let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    bytes.push((self.get(c, y, x) * 255.0).round() as u8);
                }
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }
}
