//! Quantized images: integer intensity levels in [0, K), stored [C, H, W].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<u16>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "image {channels}x{height}x{width} wants {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, r: usize, col: usize) -> usize {
        (c * self.height + r) * self.width + col
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> u16 {
        self.data[self.idx(c, r, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: u16) {
        let i = self.idx(c, r, col);
        self.data[i] = v;
    }

    pub fn subpixels(&self) -> usize {
        self.data.len()
    }

    pub fn max_level(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Network input encoding of an intensity level: (v + 0.5)/K - 0.5.
    pub fn normalize_level(v: u16, levels: usize) -> f64 {
        (v as f64 + 0.5) / levels as f64 - 0.5
    }

    /// [C, H, W] tensor of normalized intensities.
    pub fn normalized(&self, levels: usize) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data
                .iter()
                .map(|&v| Self::normalize_level(v, levels))
                .collect(),
        )
        .expect("shape matches data")
    }
}
