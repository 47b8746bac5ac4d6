//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records one training step's forward computation as a flat
//! list of nodes (inputs always precede their consumers) and replays it
//! in reverse to accumulate gradients. Tapes are rebuilt every step
//! because rollout length varies, and a tape is confined to one thread;
//! batches run one tape per sample and reduce gradients in sample order.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    Conv1x1 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        alpha: f32,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Sub {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f32,
    },
    Clamp01 {
        input: NodeId,
    },
    SliceRgba {
        input: NodeId,
    },
    CompositeWhite {
        input: NodeId,
    },
    Flatten {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    LogClamped {
        input: NodeId,
    },
    OneMinus {
        input: NodeId,
    },
    SumAll {
        input: NodeId,
    },
    MseLoss {
        pred: NodeId,
        target: NodeId,
    },
    MeanScalars {
        inputs: Vec<NodeId>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf node.
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.entries[id.0].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries[id.0].as_ref()
    }
}

/// Probabilities are clamped into this range before logs.
pub const PROB_EPS: f32 = 1e-7;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers a leaf; it is trainable when `value.requires_grad`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs_grad = value.requires_grad;
        self.push(Op::Leaf, value, needs_grad)
    }

    /// Registers a non-trainable leaf regardless of the tensor's flag.
    pub fn constant(&mut self, mut value: Tensor) -> NodeId {
        value.requires_grad = false;
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite values out of {:?} (node {})",
            op,
            self.nodes.len()
        );
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn conv3x3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.conv3x3_strided(input, weight, bias, 1)
    }

    pub fn conv3x3_strided(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::config("conv stride must be at least 1"));
        }
        let (h, w, cin) = self.value(input).hwc()?;
        let ws = &self.value(weight).shape;
        let (cout, b_len) = match ws.as_slice() {
            [3, 3, ci, co] if *ci == cin => (*co, self.value(bias).numel()),
            other => {
                return Err(Error::config(format!(
                    "conv3x3 weight must be [3, 3, {cin}, cout], got {:?}",
                    other
                )))
            }
        };
        if b_len != cout {
            return Err(Error::config(format!(
                "conv3x3 bias length {b_len} does not match cout {cout}"
            )));
        }
        let out = kernels::conv3x3_forward(
            &self.value(input).data,
            h,
            w,
            cin,
            &self.value(weight).data,
            &self.value(bias).data,
            cout,
            stride,
        );
        let (ho, wo) = (
            kernels::conv_output_side(h, stride),
            kernels::conv_output_side(w, stride),
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Conv3x3 {
                input,
                weight,
                bias,
                stride,
            },
            Tensor::new(vec![ho, wo, cout], out)?,
            needs,
        ))
    }

    pub fn conv1x1(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (h, w, cin) = self.value(input).hwc()?;
        let ws = &self.value(weight).shape;
        let cout = match ws.as_slice() {
            [ci, co] if *ci == cin => *co,
            other => {
                return Err(Error::config(format!(
                    "conv1x1 weight must be [{cin}, cout], got {:?}",
                    other
                )))
            }
        };
        if self.value(bias).numel() != cout {
            return Err(Error::config(format!(
                "conv1x1 bias length {} does not match cout {cout}",
                self.value(bias).numel()
            )));
        }
        let out = kernels::conv1x1_forward(
            &self.value(input).data,
            h * w,
            cin,
            &self.value(weight).data,
            &self.value(bias).data,
            cout,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Op::Conv1x1 {
                input,
                weight,
                bias,
            },
            Tensor::new(vec![h, w, cout], out)?,
            needs,
        ))
    }

    fn unary(&mut self, input: NodeId, shape: Vec<usize>, data: Vec<f32>, op: Op) -> NodeId {
        let needs = self.needs(input);
        self.push(
            op,
            Tensor {
                shape,
                data,
                requires_grad: false,
            },
            needs,
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = v.shape.clone();
        self.unary(input, shape, data, Op::Relu { input })
    }

    pub fn leaky_relu(&mut self, input: NodeId, alpha: f32) -> NodeId {
        let v = self.value(input);
        let data = v
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { alpha * x })
            .collect();
        let shape = v.shape.clone();
        self.unary(input, shape, data, Op::LeakyRelu { input, alpha })
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let v = self.value(input);
        let data = v.data.iter().map(|&x| factor * x).collect();
        let shape = v.shape.clone();
        self.unary(input, shape, data, Op::Scale { input, factor })
    }

    pub fn clamp01(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let shape = v.shape.clone();
        self.unary(input, shape, data, Op::Clamp01 { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = v.shape.clone();
        self.unary(input, shape, data, Op::Sigmoid { input })
    }

    /// Natural log of the input clamped into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn log_clamped(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v
            .data
            .iter()
            .map(|&x| x.clamp(PROB_EPS, 1.0 - PROB_EPS).ln())
            .collect();
        let shape = v.shape.clone();
        self.unary(input, shape, data, Op::LogClamped { input })
    }

    pub fn one_minus(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data.iter().map(|&x| 1.0 - x).collect();
        let shape = v.shape.clone();
        self.unary(input, shape, data, Op::OneMinus { input })
    }

    /// First four channels of an `[h, w, c]` tensor, unclamped.
    pub fn slice_rgba(&mut self, input: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(input).hwc()?;
        if c < 4 {
            return Err(Error::config(format!(
                "slice_rgba needs at least 4 channels, got {c}"
            )));
        }
        let src = &self.value(input).data;
        let mut data = vec![0.0f32; h * w * 4];
        for p in 0..h * w {
            data[p * 4..p * 4 + 4].copy_from_slice(&src[p * c..p * c + 4]);
        }
        Ok(self.unary(input, vec![h, w, 4], data, Op::SliceRgba { input }))
    }

    /// Composites RGBA over a white background; alpha passes through.
    pub fn composite_over_white(&mut self, input: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(input).hwc()?;
        if c != 4 {
            return Err(Error::config(format!(
                "composite_over_white needs 4 channels, got {c}"
            )));
        }
        let src = &self.value(input).data;
        let mut data = vec![0.0f32; h * w * 4];
        for p in 0..h * w {
            let a = src[p * 4 + 3];
            for k in 0..3 {
                data[p * 4 + k] = a * src[p * 4 + k] + (1.0 - a);
            }
            data[p * 4 + 3] = a;
        }
        Ok(self.unary(input, vec![h, w, 4], data, Op::CompositeWhite { input }))
    }

    /// Reinterprets an `[h, w, c]` tensor as a flat vector.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(input).hwc()?;
        let data = self.value(input).data.clone();
        Ok(self.unary(input, vec![1, 1, h * w * c], data, Op::Flatten { input }))
    }

    fn binary(&mut self, lhs: NodeId, rhs: NodeId, sub: bool) -> Result<NodeId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape != b.shape {
            return Err(Error::config(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| if sub { x - y } else { x + y })
            .collect();
        let shape = a.shape.clone();
        let needs = self.needs(lhs) || self.needs(rhs);
        let op = if sub {
            Op::Sub { lhs, rhs }
        } else {
            Op::Add { lhs, rhs }
        };
        Ok(self.push(
            op,
            Tensor {
                shape,
                data,
                requires_grad: false,
            },
            needs,
        ))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, false)
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, true)
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s: f32 = self.value(input).data.iter().sum();
        self.unary(input, vec![1], vec![s], Op::SumAll { input })
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape != t.shape {
            return Err(Error::config(format!(
                "mse_loss shape mismatch: {:?} vs {:?}",
                p.shape, t.shape
            )));
        }
        let n = p.numel() as f32;
        let sum: f32 = p
            .data
            .iter()
            .zip(&t.data)
            .map(|(&a, &b)| {
                let d = a - b;
                d * d
            })
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(
            Op::MseLoss { pred, target },
            Tensor::scalar(sum / n),
            needs,
        ))
    }

    /// Mean of any number of scalar nodes.
    pub fn mean_scalars(&mut self, inputs: Vec<NodeId>) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::usage("mean_scalars needs at least one input"));
        }
        let mut sum = 0.0f32;
        for &id in &inputs {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::usage("mean_scalars inputs must be scalars"));
            }
            sum += v.data[0];
        }
        let mean = sum / inputs.len() as f32;
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(Op::MeanScalars { inputs }, Tensor::scalar(mean), needs))
    }

    /// Propagates gradients from a scalar loss back to every trainable
    /// leaf, consuming the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let go = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &go, &mut grads);
        }

        let entries = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(data)) if node.value.requires_grad => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data,
                    requires_grad: false,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn accum(grads: &mut [Option<Vec<f32>>], id: NodeId, len: usize) -> &mut Vec<f32> {
        grads[id.0].get_or_insert_with(|| vec![0.0f32; len])
    }

    fn propagate(&self, idx: usize, go: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv3x3 {
                input,
                weight,
                bias,
                stride,
            } => {
                let (h, w, cin) = self.value(*input).hwc().expect("checked at record time");
                let cout = self.value(*bias).numel();
                let g = kernels::conv3x3_backward(
                    &self.value(*input).data,
                    h,
                    w,
                    cin,
                    &self.value(*weight).data,
                    cout,
                    *stride,
                    go,
                    self.needs(*input),
                );
                if let Some(di) = g.d_input {
                    add_into(Self::accum(grads, *input, di.len()), &di);
                }
                if self.needs(*weight) {
                    add_into(Self::accum(grads, *weight, g.d_weight.len()), &g.d_weight);
                }
                if self.needs(*bias) {
                    add_into(Self::accum(grads, *bias, g.d_bias.len()), &g.d_bias);
                }
            }
            Op::Conv1x1 {
                input,
                weight,
                bias,
            } => {
                let (h, w, cin) = self.value(*input).hwc().expect("checked at record time");
                let cout = self.value(*bias).numel();
                let g = kernels::conv1x1_backward(
                    &self.value(*input).data,
                    h * w,
                    cin,
                    &self.value(*weight).data,
                    cout,
                    go,
                    self.needs(*input),
                );
                if let Some(di) = g.d_input {
                    add_into(Self::accum(grads, *input, di.len()), &di);
                }
                if self.needs(*weight) {
                    add_into(Self::accum(grads, *weight, g.d_weight.len()), &g.d_weight);
                }
                if self.needs(*bias) {
                    add_into(Self::accum(grads, *bias, g.d_bias.len()), &g.d_bias);
                }
            }
            Op::Relu { input } => {
                let out = &self.nodes[idx].value.data;
                let gi = Self::accum(grads, *input, out.len());
                for ((g, &o), &u) in gi.iter_mut().zip(out).zip(go) {
                    if o > 0.0 {
                        *g += u;
                    }
                }
            }
            Op::LeakyRelu { input, alpha } => {
                let out = &self.nodes[idx].value.data;
                let gi = Self::accum(grads, *input, out.len());
                for ((g, &o), &u) in gi.iter_mut().zip(out).zip(go) {
                    *g += if o > 0.0 { u } else { alpha * u };
                }
            }
            Op::Add { lhs, rhs } => {
                if self.needs(*lhs) {
                    add_into(Self::accum(grads, *lhs, go.len()), go);
                }
                if self.needs(*rhs) {
                    add_into(Self::accum(grads, *rhs, go.len()), go);
                }
            }
            Op::Sub { lhs, rhs } => {
                if self.needs(*lhs) {
                    add_into(Self::accum(grads, *lhs, go.len()), go);
                }
                if self.needs(*rhs) {
                    let gr = Self::accum(grads, *rhs, go.len());
                    for (g, &u) in gr.iter_mut().zip(go) {
                        *g -= u;
                    }
                }
            }
            Op::Scale { input, factor } => {
                let gi = Self::accum(grads, *input, go.len());
                for (g, &u) in gi.iter_mut().zip(go) {
                    *g += factor * u;
                }
            }
            Op::Clamp01 { input } => {
                // Zero gradient outside [0, 1].
                let inp = &self.value(*input).data;
                let gi = Self::accum(grads, *input, inp.len());
                for ((g, &x), &u) in gi.iter_mut().zip(inp).zip(go) {
                    if (0.0..=1.0).contains(&x) {
                        *g += u;
                    }
                }
            }
            Op::SliceRgba { input } => {
                let (h, w, c) = self.value(*input).hwc().expect("checked at record time");
                let gi = Self::accum(grads, *input, h * w * c);
                for p in 0..h * w {
                    for k in 0..4 {
                        gi[p * c + k] += go[p * 4 + k];
                    }
                }
            }
            Op::CompositeWhite { input } => {
                let src = &self.value(*input).data;
                let gi = Self::accum(grads, *input, src.len());
                for p in 0..src.len() / 4 {
                    let a = src[p * 4 + 3];
                    let mut da = go[p * 4 + 3];
                    for k in 0..3 {
                        gi[p * 4 + k] += a * go[p * 4 + k];
                        da += (src[p * 4 + k] - 1.0) * go[p * 4 + k];
                    }
                    gi[p * 4 + 3] += da;
                }
            }
            Op::Flatten { input } => {
                add_into(Self::accum(grads, *input, go.len()), go);
            }
            Op::Sigmoid { input } => {
                let out = &self.nodes[idx].value.data;
                let gi = Self::accum(grads, *input, out.len());
                for ((g, &o), &u) in gi.iter_mut().zip(out).zip(go) {
                    *g += o * (1.0 - o) * u;
                }
            }
            Op::LogClamped { input } => {
                // Derivative taken at the clamped value so it stays finite.
                let inp = &self.value(*input).data;
                let gi = Self::accum(grads, *input, inp.len());
                for ((g, &x), &u) in gi.iter_mut().zip(inp).zip(go) {
                    *g += u / x.clamp(PROB_EPS, 1.0 - PROB_EPS);
                }
            }
            Op::OneMinus { input } => {
                let gi = Self::accum(grads, *input, go.len());
                for (g, &u) in gi.iter_mut().zip(go) {
                    *g -= u;
                }
            }
            Op::SumAll { input } => {
                let n = self.value(*input).numel();
                let gi = Self::accum(grads, *input, n);
                for g in gi.iter_mut() {
                    *g += go[0];
                }
            }
            Op::MseLoss { pred, target } => {
                let p = &self.value(*pred).data;
                let t = &self.value(*target).data;
                let scale = 2.0 * go[0] / p.len() as f32;
                if self.needs(*pred) {
                    let gp = Self::accum(grads, *pred, p.len());
                    for ((g, &a), &b) in gp.iter_mut().zip(p).zip(t) {
                        *g += scale * (a - b);
                    }
                }
                if self.needs(*target) {
                    let gt = Self::accum(grads, *target, t.len());
                    for ((g, &a), &b) in gt.iter_mut().zip(p).zip(t) {
                        *g -= scale * (a - b);
                    }
                }
            }
            Op::MeanScalars { inputs } => {
                let share = go[0] / inputs.len() as f32;
                for &id in inputs {
                    if self.needs(id) {
                        Self::accum(grads, id, 1)[0] += share;
                    }
                }
            }
        }
    }
}

fn add_into(acc: &mut [f32], src: &[f32]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leafv(tape: &mut Tape, shape: Vec<usize>, data: Vec<f32>, grad: bool) -> NodeId {
        let mut t = Tensor::new(shape, data).unwrap();
        t.requires_grad = grad;
        tape.leaf(t)
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![3], vec![-1.0, 0.0, 2.0], false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![4], vec![0.5, -2.0, 3.25, 0.0], false);
        let z = leafv(&mut tape, vec![4], vec![0.0; 4], false);
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data, tape.value(x).data);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![1], vec![-1.0], false);
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data, vec![-0.2]);
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], false);
        let y = leafv(&mut tape, vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], false);
        let l = tape.mse_loss(x, y).unwrap();
        assert_eq!(tape.value(l).data[0], 0.0);
    }

    #[test]
    fn mse_offset_one_is_one() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![3], vec![1.0, 2.0, 3.0], false);
        let y = leafv(&mut tape, vec![3], vec![2.0, 3.0, 4.0], false);
        let l = tape.mse_loss(x, y).unwrap();
        assert_eq!(tape.value(l).data[0], 1.0);
    }

    #[test]
    fn backward_of_mse_against_zero_is_two_x_over_n() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![4], vec![1.0, -2.0, 0.5, 3.0], true);
        let zero = leafv(&mut tape, vec![4], vec![0.0; 4], false);
        let l = tape.mse_loss(x, zero).unwrap();
        let mut grads = tape.backward(l).unwrap();
        let g = grads.take(x).unwrap();
        for (gv, xv) in g.data.iter().zip([1.0f32, -2.0, 0.5, 3.0]) {
            assert!((gv - 2.0 * xv / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_of_sum_relu_is_indicator() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![5], vec![-1.0, 2.0, -0.5, 0.0, 3.0], true);
        let r = tape.relu(x);
        let s = tape.sum_all(r);
        let mut grads = tape.backward(s).unwrap();
        let g = grads.take(x).unwrap();
        assert_eq!(g.data, vec![0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![2], vec![1.0, 2.0], true);
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn clamp01_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![3], vec![-0.5, 0.5, 1.5], true);
        let c = tape.clamp01(x);
        let s = tape.sum_all(c);
        let mut grads = tape.backward(s).unwrap();
        assert_eq!(grads.take(x).unwrap().data, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = leafv(&mut tape, vec![2], vec![1.0, 2.0], true);
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad());
        let y = tape.add(x, c).unwrap();
        let s = tape.sum_all(y);
        let mut grads = tape.backward(s).unwrap();
        assert!(grads.take(x).is_some());
        assert!(grads.take(c).is_none());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = leafv(&mut tape, vec![3], vec![0.3, -0.7, 1.1], true);
            let r = tape.leaky_relu(x, 0.2);
            let z = leafv(&mut tape, vec![3], vec![0.1, 0.2, 0.3], false);
            let l = tape.mse_loss(r, z).unwrap();
            let mut grads = tape.backward(l).unwrap();
            grads.take(x).unwrap().data
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn composite_over_white_values() {
        let mut tape = Tape::new();
        // Fully transparent pixel becomes white; opaque red stays red.
        let x = leafv(
            &mut tape,
            vec![1, 2, 4],
            vec![0.2, 0.4, 0.6, 0.0, 1.0, 0.0, 0.0, 1.0],
            false,
        );
        let y = tape.composite_over_white(x).unwrap();
        assert_eq!(
            tape.value(y).data,
            vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn slice_rgba_takes_first_four_channels() {
        let mut tape = Tape::new();
        let mut data = vec![0.0f32; 6];
        for (i, v) in data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let x = leafv(&mut tape, vec![1, 1, 6], data, false);
        let y = tape.slice_rgba(x).unwrap();
        assert_eq!(tape.value(y).data, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn mean_scalars_averages() {
        let mut tape = Tape::new();
        let a = leafv(&mut tape, vec![1], vec![1.0], true);
        let b = leafv(&mut tape, vec![1], vec![3.0], true);
        let m = tape.mean_scalars(vec![a, b]).unwrap();
        assert_eq!(tape.value(m).data[0], 2.0);
        let mut grads = tape.backward(m).unwrap();
        assert_eq!(grads.take(a).unwrap().data[0], 0.5);
        assert_eq!(grads.take(b).unwrap().data[0], 0.5);
    }
}
