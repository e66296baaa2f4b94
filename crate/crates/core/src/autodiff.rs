//! Define-by-run reverse-mode autodiff over flat f64 buffers.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays them in reverse, accumulating gradients for every reachable value.
//! Tapes are cheap and rebuilt per training step; evaluation code paths use
//! the pure layer functions instead and never touch a tape.

use crate::error::{Error, Result};
use crate::field::{ConvKind, FeatureField};
use crate::kernels;
use crate::losses;
use crate::morphology::BinaryMask;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Conv { input: ValueId, weights: ValueId, bias: ValueId, kind: ConvKind },
    Relu { input: ValueId },
    Add { a: ValueId, b: ValueId },
    Concat { a: ValueId, b: ValueId },
    AvgPool2 { input: ValueId },
    /// `flow` is a 2-channel value: channel 0 is dx, channel 1 is dy.
    Warp { input: ValueId, flow: ValueId },
    Sum { input: ValueId },
    Bce { logits: ValueId, targets: Vec<f64>, pos_weight: f64 },
    Dice { logits: ValueId, targets: Vec<f64>, smooth: f64 },
    /// Weighted sum of scalar values.
    SumScalars { terms: Vec<(ValueId, f64)> },
}

struct Node {
    data: Vec<f64>,
    shape: (usize, usize, usize),
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: (usize, usize, usize), op: Op) -> ValueId {
        debug_assert_eq!(data.len(), shape.0 * shape.1 * shape.2);
        self.grads.push(vec![0.0; data.len()]);
        self.nodes.push(Node { data, shape, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a field-shaped leaf (an input or activation source).
    pub fn leaf(&mut self, field: &FeatureField) -> ValueId {
        self.push(field.values().to_vec(), field.shape(), Op::Leaf)
    }

    /// Record a flat parameter leaf (conv weights or bias).
    pub fn leaf_buf(&mut self, data: Vec<f64>) -> ValueId {
        let n = data.len();
        self.push(data, (n, 1, 1), Op::Leaf)
    }

    pub fn shape(&self, id: ValueId) -> (usize, usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Copy a recorded value out as a field.
    pub fn field(&self, id: ValueId) -> FeatureField {
        let (c, h, w) = self.nodes[id.0].shape;
        FeatureField::from_vec(c, h, w, self.nodes[id.0].data.clone()).expect("tape shapes are consistent")
    }

    /// Gradient of the last backward pass; zeros before any backward call.
    pub fn grad(&self, id: ValueId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn conv(&mut self, input: ValueId, weights: ValueId, bias: ValueId, kind: ConvKind) -> Result<ValueId> {
        if input.0 == weights.0 || input.0 == bias.0 || weights.0 == bias.0 {
            return Err(Error::Config("conv operands must be distinct tape values".into()));
        }
        let (in_c, h, w) = self.nodes[input.0].shape;
        let out_c = self.nodes[bias.0].data.len();
        let expect = kind.kernel_len() * in_c * out_c;
        if self.nodes[weights.0].data.len() != expect {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect} weights for {} {in_c}->{out_c}", kind.name()),
                got: format!("{}", self.nodes[weights.0].data.len()),
            });
        }
        let (oh, ow) = match kind {
            ConvKind::Deconv2x2 => (2 * h, 2 * w),
            _ => (h, w),
        };
        let mut out = vec![0.0; out_c * oh * ow];
        kernels::conv_fwd(
            kind,
            &self.nodes[input.0].data,
            in_c,
            h,
            w,
            &self.nodes[weights.0].data,
            &self.nodes[bias.0].data,
            out_c,
            &mut out,
        );
        Ok(self.push(out, (out_c, oh, ow), Op::Conv { input, weights, bias, kind }))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let mut out = self.nodes[input.0].data.clone();
        kernels::relu_fwd(&mut out);
        let shape = self.nodes[input.0].shape;
        self.push(out, shape, Op::Relu { input })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.nodes[a.0].shape;
        let sb = self.nodes[b.0].shape;
        if sa != sb {
            return Err(Error::ShapeMismatch { expected: format!("{sa:?}"), got: format!("{sb:?}") });
        }
        let out = self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        Ok(self.push(out, sa, Op::Add { a, b }))
    }

    pub fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ca, ha, wa) = self.nodes[a.0].shape;
        let (cb, hb, wb) = self.nodes[b.0].shape;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch {
                expected: format!("{ha}x{wa} spatial"),
                got: format!("{hb}x{wb}"),
            });
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(&self.nodes[a.0].data);
        out.extend_from_slice(&self.nodes[b.0].data);
        Ok(self.push(out, (ca + cb, ha, wa), Op::Concat { a, b }))
    }

    pub fn avg_pool2(&mut self, input: ValueId) -> Result<ValueId> {
        let (c, h, w) = self.nodes[input.0].shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                expected: "even spatial dims for 2x pooling".into(),
                got: format!("{h}x{w}"),
            });
        }
        let mut out = vec![0.0; c * (h / 2) * (w / 2)];
        kernels::avg_pool2_fwd(&self.nodes[input.0].data, c, h, w, &mut out);
        Ok(self.push(out, (c, h / 2, w / 2), Op::AvgPool2 { input }))
    }

    /// Bilinear warp of `input` by a 2-channel flow (dx = channel 0, dy = channel 1).
    pub fn warp(&mut self, input: ValueId, flow: ValueId) -> Result<ValueId> {
        let (c, h, w) = self.nodes[input.0].shape;
        let fs = self.nodes[flow.0].shape;
        if fs != (2, h, w) {
            return Err(Error::ShapeMismatch { expected: format!("(2, {h}, {w}) flow"), got: format!("{fs:?}") });
        }
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        let (dx, dy) = self.nodes[flow.0].data.split_at(plane);
        kernels::warp_fwd(&self.nodes[input.0].data, c, h, w, dx, dy, &mut out);
        Ok(self.push(out, (c, h, w), Op::Warp { input, flow }))
    }

    /// Scalar sum of every element.
    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let s: f64 = self.nodes[input.0].data.iter().sum();
        self.push(vec![s], (1, 1, 1), Op::Sum { input })
    }

    fn loss_targets(&self, logits: ValueId, target: &BinaryMask) -> Result<Vec<f64>> {
        let (c, h, w) = self.nodes[logits.0].shape;
        if c != 1 || h != target.height() || w != target.width() {
            return Err(Error::ShapeMismatch {
                expected: format!("1x{}x{} logits", target.height(), target.width()),
                got: format!("{c}x{h}x{w}"),
            });
        }
        Ok(losses::mask_bits_f64(target))
    }

    /// Mean binary cross-entropy against a binary target.
    pub fn bce(&mut self, logits: ValueId, target: &BinaryMask) -> Result<ValueId> {
        let t = self.loss_targets(logits, target)?;
        let v = losses::bce_forward(&self.nodes[logits.0].data, &t, 1.0);
        Ok(self.push(vec![v], (1, 1, 1), Op::Bce { logits, targets: t, pos_weight: 1.0 }))
    }

    /// BCE with the positive term scaled by #neg/#pos (plain BCE when no positives).
    pub fn weighted_bce(&mut self, logits: ValueId, target: &BinaryMask) -> Result<ValueId> {
        let t = self.loss_targets(logits, target)?;
        let w = losses::auto_pos_weight(&t);
        let v = losses::bce_forward(&self.nodes[logits.0].data, &t, w);
        Ok(self.push(vec![v], (1, 1, 1), Op::Bce { logits, targets: t, pos_weight: w }))
    }

    /// Smoothed Dice loss on sigmoid probabilities.
    pub fn dice(&mut self, logits: ValueId, target: &BinaryMask, smooth: f64) -> Result<ValueId> {
        let t = self.loss_targets(logits, target)?;
        let v = losses::dice_forward(&self.nodes[logits.0].data, &t, smooth);
        Ok(self.push(vec![v], (1, 1, 1), Op::Dice { logits, targets: t, smooth }))
    }

    /// Weighted sum of scalar values (loss combination).
    pub fn sum_scalars(&mut self, terms: &[(ValueId, f64)]) -> Result<ValueId> {
        let mut acc = 0.0;
        for &(id, weight) in terms {
            if self.nodes[id.0].data.len() != 1 {
                return Err(Error::NotScalar);
            }
            acc += weight * self.nodes[id.0].data[0];
        }
        Ok(self.push(vec![acc], (1, 1, 1), Op::SumScalars { terms: terms.to_vec() }))
    }

    /// Reverse sweep from a scalar loss; seeds with gradient 1 and accumulates
    /// into every value the loss depends on.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NotScalar);
        }
        self.backward_done = true;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let g = std::mem::take(&mut grads[idx]);
            match &node.op {
                Op::Leaf => {}
                Op::Conv { input, weights, bias, kind } => {
                    let (in_c, h, w) = nodes[input.0].shape;
                    let out_c = nodes[bias.0].data.len();
                    // The three operands are distinct, enforced at record time.
                    let mut d_inp = std::mem::take(&mut grads[input.0]);
                    let mut d_w = std::mem::take(&mut grads[weights.0]);
                    let mut d_b = std::mem::take(&mut grads[bias.0]);
                    kernels::conv_bwd(
                        *kind,
                        &g,
                        &nodes[input.0].data,
                        in_c,
                        h,
                        w,
                        &nodes[weights.0].data,
                        out_c,
                        &mut d_inp,
                        &mut d_w,
                        &mut d_b,
                    );
                    grads[input.0] = d_inp;
                    grads[weights.0] = d_w;
                    grads[bias.0] = d_b;
                }
                Op::Relu { input } => {
                    kernels::relu_bwd(&g, &nodes[input.0].data, &mut grads[input.0]);
                }
                Op::Add { a, b } => {
                    for (d, gv) in grads[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, gv) in grads[b.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Concat { a, b } => {
                    let na = nodes[a.0].data.len();
                    for (d, gv) in grads[a.0].iter_mut().zip(&g[..na]) {
                        *d += gv;
                    }
                    for (d, gv) in grads[b.0].iter_mut().zip(&g[na..]) {
                        *d += gv;
                    }
                }
                Op::AvgPool2 { input } => {
                    let (c, h, w) = nodes[input.0].shape;
                    kernels::avg_pool2_bwd(&g, c, h, w, &mut grads[input.0]);
                }
                Op::Warp { input, flow } => {
                    let (c, h, w) = nodes[input.0].shape;
                    let plane = h * w;
                    let (dx, dy) = nodes[flow.0].data.split_at(plane);
                    let mut d_inp = std::mem::take(&mut grads[input.0]);
                    let mut d_flow = std::mem::take(&mut grads[flow.0]);
                    {
                        let (d_dx, d_dy) = d_flow.split_at_mut(plane);
                        kernels::warp_bwd(&g, &nodes[input.0].data, c, h, w, dx, dy, &mut d_inp, d_dx, d_dy);
                    }
                    grads[input.0] = d_inp;
                    grads[flow.0] = d_flow;
                }
                Op::Sum { input } => {
                    for d in grads[input.0].iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Bce { logits, targets, pos_weight } => {
                    losses::bce_backward(&nodes[logits.0].data, targets, *pos_weight, g[0], &mut grads[logits.0]);
                }
                Op::Dice { logits, targets, smooth } => {
                    losses::dice_backward(&nodes[logits.0].data, targets, *smooth, g[0], &mut grads[logits.0]);
                }
                Op::SumScalars { terms } => {
                    for &(id, weight) in terms {
                        grads[id.0][0] += weight * g[0];
                    }
                }
            }
            grads[idx] = g;
        }
        Ok(())
    }
}
