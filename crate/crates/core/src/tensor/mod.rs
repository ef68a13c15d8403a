//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The operator set is exactly what the networks need: masked 2-D
//! convolution, a few elementwise ops, softmax cross-entropy, and some
//! data-marshalling ops (concat, patch split, embedding bias). Everything
//! runs in f64; forward results are bit-deterministic for fixed inputs
//! regardless of the rayon thread count (each output element accumulates
//! in a fixed order).

mod graph;
mod kernels;
mod optimizer;
#[cfg(test)]
mod tests;

pub use graph::{Grads, Graph, NodeId};
pub use kernels::bilinear_resize;
pub use optimizer::{rmsprop_step, RmsPropState};

use crate::error::Result as CrateResult;

/// Plain-data [B, C, H, W] -> [B*(H/m)*(W/m), C, m, m] rearrangement, the
/// same layout the graph's patch-split op produces.
pub fn patch_split_tensor(x: &Tensor, m: usize) -> CrateResult<Tensor> {
    kernels::patch_split_forward(x, m)
}

/// Stabilized log-sum-exp over one logits row; the one implementation every
/// likelihood consumer shares.
pub fn log_sum_exp_row(row: &[f64]) -> f64 {
    kernels::log_sum_exp(row)
}

use crate::error::{Error, Result};

/// Zero-fill padding that preserves spatial dims (odd kernels only), or no
/// padding at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// A dense row-major f64 array. Activations are [batch, channels, h, w];
/// conv kernels are [out_channels, in_channels, kh, kw].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Flat offset of [b, c, h, w] in a rank-4 tensor.
    pub fn idx4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx4(b, c, h, w)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality; distinguishes 0.0 from -0.0 and compares NaN bits.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
