//! Dense `H x W x C` grids of `f64` latent values.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Spatial and channel extent of a [`LatentFrame`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial positions (`height * width`).
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for FrameShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// One frame's latent state. Values are stored row-major with the channel
/// index varying fastest: `values[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    shape: FrameShape,
    values: Vec<f64>,
}

impl LatentFrame {
    pub fn zeros(shape: FrameShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: FrameShape, value: f64) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: FrameShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                values.len(),
            ));
        }
        Ok(Self { shape, values })
    }

    /// Frame of independent standard normal entries.
    pub fn gaussian<R: Rng + ?Sized>(shape: FrameShape, rng: &mut R) -> Self {
        let values = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, values }
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.shape.width + x) * self.shape.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let idx = (y * self.shape.width + x) * self.shape.channels + c;
        self.values[idx] = v;
    }

    /// Mean over channels at each spatial position, row-major.
    pub fn channel_mean(&self) -> Vec<f64> {
        let c = self.shape.channels;
        self.values
            .chunks_exact(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LatentFrame) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentFrame {
        LatentFrame {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped frames.
    pub fn zip_with(&self, other: &LatentFrame, f: impl Fn(f64, f64) -> f64) -> Result<LatentFrame> {
        self.ensure_same_shape(other)?;
        Ok(LatentFrame {
            shape: self.shape,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &LatentFrame, b: f64) -> Result<LatentFrame> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, a: f64) -> LatentFrame {
        self.map(|v| a * v)
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, other: &LatentFrame, a: f64) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (x, &y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Mean absolute elementwise difference.
    pub fn mean_abs_diff(&self, other: &LatentFrame) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let sum: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum();
        Ok(sum / self.values.len() as f64)
    }
}
