//! Dense float tensors and reverse-mode differentiation.
//!
//! Everything in this crate computes on [`Tensor`]: a flat `Vec<f32>` in
//! row-major `(y, x, channel)` order plus a shape. Differentiable
//! computations are recorded on a [`tape::Tape`] rebuilt every training
//! step, and [`optim`] provides the Adam update and gradient
//! normalization used by the trainers.

pub mod kernels;
pub mod optim;
pub mod tape;

pub use kernels::conv_output_side;

use crate::error::{Error, Result};

/// A dense 32-bit float tensor.
///
/// Shapes are either `[h, w, c]` grids (row-major, channel fastest) or
/// flat `[n]` vectors; convolution weights use `[3, 3, cin, cout]` and
/// `[cin, cout]` with the output channel fastest. `requires_grad` marks
/// trainable leaves when the tensor is registered on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Height, width and channel count of an `[h, w, c]` tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w, c] => Ok((*h, *w, *c)),
            other => Err(Error::config(format!(
                "expected an [h, w, c] tensor, got shape {:?}",
                other
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Mean squared difference over all elements; the two shapes must match.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape != b.shape {
        return Err(Error::config(format!(
            "mse shape mismatch: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let sum: f32 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 2, 1], vec![0.0; 4]).is_ok());
        assert!(Tensor::new(vec![2, 2, 1], vec![0.0; 5]).is_err());
    }

    #[test]
    fn mse_identical_is_zero() {
        let t = Tensor::new(vec![3, 2, 1], vec![1.0, -2.0, 3.5, 0.0, 9.0, 4.0]).unwrap();
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn mse_offset_by_one_is_one() {
        let a = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 7.0]).unwrap();
        let mut b = a.clone();
        for v in &mut b.data {
            *v += 1.0;
        }
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let a = Tensor::new(vec![2, 3, 1], vec![0.1, 0.9, -0.4, 2.0, 1.5, -3.0]).unwrap();
        let b = Tensor::new(vec![2, 3, 1], vec![0.0, 1.0, 0.4, -2.0, 1.5, 3.0]).unwrap();
        let mut acc = 0.0f32;
        for i in 0..6 {
            let d = a.data[i] - b.data[i];
            acc += d * d;
        }
        assert_eq!(mse(&a, &b).unwrap(), acc / 6.0);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 2, 1]);
        let b = Tensor::zeros(vec![4]);
        assert!(mse(&a, &b).is_err());
    }
}

pub fn bench_fwd(inp: &[f32], h: usize, w: usize, cin: usize, wgt: &[f32], bias: &[f32], cout: usize) -> Vec<f32> {
    kernels::conv3x3_forward(inp, h, w, cin, wgt, bias, cout, 1)
}
pub fn bench_bwd(inp: &[f32], h: usize, w: usize, cin: usize, wgt: &[f32], cout: usize, dout: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let g = kernels::conv3x3_backward(inp, h, w, cin, wgt, cout, 1, dout, true);
    (g.d_input.unwrap(), g.d_weight)
}
