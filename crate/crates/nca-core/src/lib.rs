//! Neural cellular automata that grow images from edge seeds.
//!
//! A single residual cell rule (one 3x3 perception convolution, one 1x1
//! mixing convolution, applied synchronously at every grid position) is
//! iterated 50-60 times to turn an edge drawing into a full RGBA image.
//! The same rule can be trained two ways:
//!
//! - supervised, with a pixel-wise L2 loss against ground truth and a
//!   sample pool that teaches the rule to keep finished images stable;
//! - adversarially, where the rollout acts as the generator of a GAN
//!   conditioned on edge images ("GANCA"), which generalizes much
//!   better to edges unlike the training set.
//!
//! Everything runs on a small reverse-mode tape built for exactly this
//! workload; see [`tensor`] for the numeric substrate, [`model`] for the
//! cell rule, [`train`] / [`gan`] for the two trainers, and [`eval`] for
//! reports and image export.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod faces;
pub mod gan;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

// Temporary benchmark shims (removed before release).
pub fn bench_conv3x3_fwd(inp: &[f32], h: usize, w: usize, cin: usize, wgt: &[f32], bias: &[f32], cout: usize) -> Vec<f32> {
    tensor::bench_fwd(inp, h, w, cin, wgt, bias, cout)
}
pub fn bench_conv3x3_bwd(inp: &[f32], h: usize, w: usize, cin: usize, wgt: &[f32], cout: usize, dout: &[f32]) -> (Vec<f32>, Vec<f32>) {
    tensor::bench_bwd(inp, h, w, cin, wgt, cout, dout)
}
