//! Reverse-mode autodiff tape over the primitive ops the models are built
//! from.
//!
//! A [`Graph`] records one forward computation (typically one sample); every
//! primitive validates its shape rule, computes its output eagerly, and
//! checks it for non-finite values. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for the trainable parameters that were
//! bound with [`Graph::param`]. Parameters from a frozen [`ParamStore`] are
//! constants: gradients still flow *through* the ops that use them (so a
//! frozen classifier can steer an upstream generator) but none are
//! accumulated *for* them.
//!
//! Reductions accumulate in `f64` regardless of the storage scalar.

use crate::error::TensorError;
use crate::params::{GradMap, ParamStore};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Input,
    Param(#[allow(dead_code)] String),
    /// inputs: [x, w, b]; x [C,H,W], w [Cout,C,kh,kw], b [Cout]
    Conv2d { stride: usize, pad: usize },
    /// inputs: [x, w, b]; x [C,H,W], w [C,Cout,kh,kw], b [Cout]
    ConvT2d { stride: usize },
    /// inputs: [x, w, b]; x [Fin], w [Fout,Fin], b [Fout]
    Linear,
    LeakyRelu { alpha: S },
    Sigmoid,
    Tanh,
    InstanceNorm,
    GlobalAvgPool,
    ConcatChannels,
    Add,
    Mul,
    ClampRange { lo: S, hi: S },
    /// inputs: [x, gamma, beta]; x [C,H,W], gamma/beta [C]
    Film,
    MseMean,
    BceWithLogitsMean { targets: Vec<f64> },
    WeightedSum { coefs: Vec<f64> },
}

#[derive(Debug)]
enum Ctx {
    None,
    Norm { inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
    needs_grad: bool,
    trainable: bool,
    ctx: Ctx,
}

/// One recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    bound: HashMap<String, NodeId>,
    freeze_depth: usize,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new(), freeze_depth: 0 }
    }

    /// Runs `f` with every parameter bound inside treated as a constant,
    /// regardless of its store's frozen flag. Used to hold one player of the
    /// adversarial game fixed during the other's update.
    pub fn bind_frozen<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        self.freeze_depth += 1;
        let out = f(self);
        self.freeze_depth -= 1;
        out
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        self.nodes[id.0].value.item()
    }

    /// Records a constant input (no gradient).
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Input, vec![], value, false, false, Ctx::None)
    }

    /// Binds a named parameter from `store`, memoized per graph so repeated
    /// uses share one leaf and accumulate one gradient. Trainable unless the
    /// store is frozen or the binding happens inside [`Graph::bind_frozen`].
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<NodeId, TensorError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor =
            store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?.clone();
        let trainable = !store.is_frozen() && self.freeze_depth == 0;
        let id =
            self.push(Op::Param(name.to_string()), vec![], tensor, trainable, trainable, Ctx::None);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn push(
        &mut self,
        op: Op<S>,
        inputs: Vec<NodeId>,
        value: Tensor<S>,
        needs_grad: bool,
        trainable: bool,
        ctx: Ctx,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value, needs_grad, trainable, ctx });
        id
    }

    fn push_op(
        &mut self,
        op: Op<S>,
        inputs: Vec<NodeId>,
        value: Tensor<S>,
        ctx: Ctx,
    ) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push(op, inputs, value, needs_grad, false, ctx))
    }

    fn shape3(&self, id: NodeId, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        let s = self.value(id).shape();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected [C,H,W], got {s:?}"),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// 2D convolution with zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "conv2d";
        let (c, h, wid) = self.shape3(x, OP)?;
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if ws.len() != 4 || ws[1] != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("weight {ws:?} incompatible with input channels {c}"),
            });
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if bs != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("bias {bs:?}, want [{cout}]"),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{wid}"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let k = c * kh * kw;
        let m = ho * wo;
        let mut cols = vec![S::zero(); k * m];
        im2col(self.value(x).data(), c, h, wid, kh, kw, stride, pad, ho, wo, &mut cols);
        let mut out = vec![S::zero(); cout * m];
        S::gemm(
            cout,
            k,
            m,
            S::one(),
            self.value(w).data(),
            k as isize,
            1,
            &cols,
            m as isize,
            1,
            S::zero(),
            &mut out,
        );
        let bias = self.value(b).data().to_vec();
        for (co, chunk) in out.chunks_exact_mut(m).enumerate() {
            let bv = bias[co];
            for v in chunk {
                *v = *v + bv;
            }
        }
        let value = Tensor::from_vec(&[cout, ho, wo], out)?;
        self.push_op(Op::Conv2d { stride, pad }, vec![x, w, b], value, Ctx::None)
    }

    /// Transposed 2D convolution (no padding); the upsampling dual of
    /// [`Graph::conv2d`]. Output spatial size is `(h-1)*stride + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "conv_transpose2d";
        let (c, h, wid) = self.shape3(x, OP)?;
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if ws.len() != 4 || ws[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("weight {ws:?} incompatible with input channels {c}"),
            });
        }
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        if bs != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("bias {bs:?}, want [{cout}]"),
            });
        }
        if stride == 0 {
            return Err(TensorError::ShapeMismatch { op: OP, detail: "stride 0".into() });
        }
        let ho = (h - 1) * stride + kh;
        let wo = (wid - 1) * stride + kw;

        // cols[q, i] = sum_c w[c, q] * x[c, i] with q = (cout, kh, kw)
        let q = cout * kh * kw;
        let hw = h * wid;
        let mut cols = vec![S::zero(); q * hw];
        S::gemm(
            q,
            c,
            hw,
            S::one(),
            self.value(w).data(),
            1,
            q as isize,
            self.value(x).data(),
            hw as isize,
            1,
            S::zero(),
            &mut cols,
        );
        let mut out = vec![S::zero(); cout * ho * wo];
        col2im(&cols, cout, ho, wo, kh, kw, stride, 0, h, wid, &mut out);
        let bias = self.value(b).data().to_vec();
        for (co, chunk) in out.chunks_exact_mut(ho * wo).enumerate() {
            let bv = bias[co];
            for v in chunk {
                *v = *v + bv;
            }
        }
        let value = Tensor::from_vec(&[cout, ho, wo], out)?;
        self.push_op(Op::ConvT2d { stride }, vec![x, w, b], value, Ctx::None)
    }

    /// Fully connected layer on a 1-D input.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "linear";
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            });
        }
        let (fout, fin) = (ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); fout];
        for (o, outv) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            let row = &wv[o * fin..(o + 1) * fin];
            for (wi, xi) in row.iter().zip(xv) {
                acc += wi.as_f64() * xi.as_f64();
            }
            *outv = S::from_f64(acc + bv[o].as_f64());
        }
        let value = Tensor::from_vec(&[fout], out)?;
        self.push_op(Op::Linear, vec![x, w, b], value, Ctx::None)
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: S) -> Result<NodeId, TensorError> {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { alpha * v });
        self.push_op(Op::LeakyRelu { alpha }, vec![x], value, Ctx::None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(x).map(|v| S::from_f64(sigmoid64(v.as_f64())));
        self.push_op(Op::Sigmoid, vec![x], value, Ctx::None)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(x).map(|v| v.tanh());
        self.push_op(Op::Tanh, vec![x], value, Ctx::None)
    }

    /// Per-channel normalization over the spatial extent (no learned affine;
    /// scale/shift come from downstream convs or FiLM).
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId, TensorError> {
        const OP: &str = "instance_norm";
        let (c, h, w) = self.shape3(x, OP)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); c * hw];
        let mut inv_stds = vec![0.0f64; c];
        for ch in 0..c {
            let xs = &xv[ch * hw..(ch + 1) * hw];
            let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
            let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / hw as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            inv_stds[ch] = inv_std;
            for (o, v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(xs) {
                *o = S::from_f64((v.as_f64() - mean) * inv_std);
            }
        }
        let value = Tensor::from_vec(&[c, h, w], out)?;
        self.push_op(Op::InstanceNorm, vec![x], value, Ctx::Norm { inv_std: inv_stds })
    }

    /// [C,H,W] -> [C] channel means.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "global_avg_pool";
        let (c, h, w) = self.shape3(x, OP)?;
        let hw = (h * w) as f64;
        let xv = self.value(x).data();
        let out: Vec<S> = (0..c)
            .map(|ch| {
                let s: f64 = xv[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.as_f64()).sum();
                S::from_f64(s / hw)
            })
            .collect();
        let value = Tensor::from_vec(&[c], out)?;
        self.push_op(Op::GlobalAvgPool, vec![x], value, Ctx::None)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "concat_channels";
        let (ca, ha, wa) = self.shape3(a, OP)?;
        let (cb, hb, wb) = self.shape3(b, OP)?;
        if (ha, wa) != (hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("spatial {ha}x{wa} vs {hb}x{wb}"),
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec(&[ca + cb, ha, wa], data)?;
        self.push_op(Op::ConcatChannels, vec![a, b], value, Ctx::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    fn elementwise_pair(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let data: Vec<S> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push_op(op, vec![a, b], value, Ctx::None)
    }

    /// Elementwise clamp to `[lo, hi]`. The subgradient convention passes
    /// gradient through on the closed interval.
    pub fn clamp(&mut self, x: NodeId, lo: S, hi: S) -> Result<NodeId, TensorError> {
        let value = self.value(x).map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.push_op(Op::ClampRange { lo, hi }, vec![x], value, Ctx::None)
    }

    /// FiLM-style feature-wise affine modulation:
    /// `out[c,i,j] = gamma[c] * x[c,i,j] + beta[c]`.
    pub fn film(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "film";
        let (c, h, w) = self.shape3(x, OP)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!(
                    "gamma {:?} / beta {:?}, want [{c}]",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![S::zero(); c * hw];
        for ch in 0..c {
            let (g, bb) = (gv[ch], bv[ch]);
            for (o, v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&xv[ch * hw..(ch + 1) * hw]) {
                *o = g * *v + bb;
            }
        }
        let value = Tensor::from_vec(&[c, h, w], out)?;
        self.push_op(Op::Film, vec![x, gamma, beta], value, Ctx::None)
    }

    /// Mean squared error over all elements -> `[1]`.
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "mse_mean";
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let n = self.value(a).numel() as f64;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        let value = Tensor::scalar(S::from_f64(sum / n));
        self.push_op(Op::MseMean, vec![a, b], value, Ctx::None)
    }

    /// Numerically stable binary cross entropy with logits, averaged over
    /// elements -> `[1]`. `targets` length must match the logit count.
    pub fn bce_with_logits_mean(
        &mut self,
        logits: NodeId,
        targets: &[f64],
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "bce_with_logits_mean";
        let n = self.value(logits).numel();
        if n != targets.len() || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("{n} logits vs {} targets", targets.len()),
            });
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::ShapeMismatch { op: OP, detail: "non-binary target".into() });
        }
        let sum: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| {
                let z = z.as_f64();
                z.max(0.0) - t * z + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar(S::from_f64(sum / n as f64));
        self.push_op(
            Op::BceWithLogitsMean { targets: targets.to_vec() },
            vec![logits],
            value,
            Ctx::None,
        )
    }

    /// Single-logit convenience for [`Graph::bce_with_logits_mean`].
    pub fn bce_with_logit(&mut self, logit: NodeId, target: f64) -> Result<NodeId, TensorError> {
        let n = self.value(logit).numel();
        self.bce_with_logits_mean(logit, &vec![target; n])
    }

    /// Weighted sum of `[1]`-shaped terms -> `[1]`. Zero-coefficient terms
    /// contribute nothing to the value and are pruned from the backward
    /// pass, so a zero weight is exactly equivalent to omitting the term.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId, TensorError> {
        const OP: &str = "weighted_sum";
        for (id, _) in terms {
            if self.value(*id).shape() != [1] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    detail: format!("term shape {:?}, want [1]", self.value(*id).shape()),
                });
            }
        }
        let sum: f64 = terms
            .iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|(id, c)| c * self.scalar_value(*id).as_f64())
            .sum();
        let inputs: Vec<NodeId> = terms.iter().map(|(id, _)| *id).collect();
        let coefs: Vec<f64> = terms.iter().map(|(_, c)| *c).collect();
        self.push_op(Op::WeightedSum { coefs }, inputs, Tensor::scalar(S::from_f64(sum)), Ctx::None)
    }

    /// Reverse pass from a `[1]`-shaped loss node. Returns gradients for all
    /// trainable parameters bound into this graph; a trainable parameter the
    /// loss does not reach gets an explicit zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap<S>, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: "loss node has no recorded forward context".into(),
            });
        }
        if self.nodes[loss.0].value.shape() != [1] {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be [1], got {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(S::one()));
            for id in (0..=loss.0).rev() {
                if !self.nodes[id].needs_grad {
                    grads[id] = None;
                    continue;
                }
                // Leaves keep their accumulated gradient for collection.
                if matches!(self.nodes[id].op, Op::Param(_) | Op::Input) {
                    continue;
                }
                let Some(g) = grads[id].take() else { continue };
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                self.dispatch_backward(id, &g, &mut grads)?;
            }
        }
        let mut out = GradMap::new();
        for (name, &id) in &self.bound {
            if self.nodes[id.0].trainable {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<S>>],
        id: NodeId,
        g: Tensor<S>,
    ) -> Result<(), TensorError> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn dispatch_backward(
        &self,
        id: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { stride, pad } => {
                self.conv2d_backward(id, g, *stride, *pad, grads)?;
            }
            Op::ConvT2d { stride } => {
                self.convt2d_backward(id, g, *stride, grads)?;
            }
            Op::Linear => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let (fout, fin) = (self.value(w).shape()[0], self.value(w).shape()[1]);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); fin];
                    for o in 0..fout {
                        let go = g.data()[o];
                        let row = &wv[o * fin..(o + 1) * fin];
                        for (dxi, wi) in dx.iter_mut().zip(row) {
                            *dxi = *dxi + go * *wi;
                        }
                    }
                    self.accumulate(grads, x, Tensor::from_vec(&[fin], dx)?)?;
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![S::zero(); fout * fin];
                    for o in 0..fout {
                        let go = g.data()[o];
                        for (dwi, xi) in dw[o * fin..(o + 1) * fin].iter_mut().zip(xv) {
                            *dwi = go * *xi;
                        }
                    }
                    self.accumulate(grads, w, Tensor::from_vec(&[fout, fin], dw)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, b, g.clone())?;
                }
            }
            Op::LeakyRelu { alpha } => {
                let xv = self.value(ins[0]).data();
                let data: Vec<S> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > S::zero() { gi } else { *alpha * gi })
                    .collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(g.shape(), data)?)?;
            }
            Op::Sigmoid => {
                let yv = node.value.data();
                let data: Vec<S> =
                    g.data().iter().zip(yv).map(|(&gi, &y)| gi * y * (S::one() - y)).collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(g.shape(), data)?)?;
            }
            Op::Tanh => {
                let yv = node.value.data();
                let data: Vec<S> =
                    g.data().iter().zip(yv).map(|(&gi, &y)| gi * (S::one() - y * y)).collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(g.shape(), data)?)?;
            }
            Op::InstanceNorm => {
                let Ctx::Norm { inv_std, .. } = &node.ctx else { unreachable!() };
                let shape = node.value.shape();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                let yv = node.value.data();
                let mut dx = vec![S::zero(); c * hw];
                for ch in 0..c {
                    let gs = &g.data()[ch * hw..(ch + 1) * hw];
                    let ys = &yv[ch * hw..(ch + 1) * hw];
                    let mean_g: f64 =
                        gs.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
                    let mean_gy: f64 = gs
                        .iter()
                        .zip(ys)
                        .map(|(gi, yi)| gi.as_f64() * yi.as_f64())
                        .sum::<f64>()
                        / hw as f64;
                    let r = inv_std[ch];
                    for ((dxi, gi), yi) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(gs).zip(ys) {
                        *dxi =
                            S::from_f64(r * (gi.as_f64() - mean_g - yi.as_f64() * mean_gy));
                    }
                }
                self.accumulate(grads, ins[0], Tensor::from_vec(self.value(ins[0]).shape(), dx)?)?;
            }
            Op::GlobalAvgPool => {
                let xs = self.value(ins[0]).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let scale = S::from_f64(1.0 / (h * w) as f64);
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    let gv = g.data()[ch] * scale;
                    for v in &mut dx[ch * h * w..(ch + 1) * h * w] {
                        *v = gv;
                    }
                }
                self.accumulate(grads, ins[0], Tensor::from_vec(&[c, h, w], dx)?)?;
            }
            Op::ConcatChannels => {
                let na = self.value(ins[0]).numel();
                let (sa, sb) = (self.value(ins[0]).shape(), self.value(ins[1]).shape());
                if self.nodes[ins[0].0].needs_grad {
                    let da = g.data()[..na].to_vec();
                    self.accumulate(grads, ins[0], Tensor::from_vec(sa, da)?)?;
                }
                if self.nodes[ins[1].0].needs_grad {
                    let db = g.data()[na..].to_vec();
                    self.accumulate(grads, ins[1], Tensor::from_vec(sb, db)?)?;
                }
            }
            Op::Add => {
                self.accumulate(grads, ins[0], g.clone())?;
                self.accumulate(grads, ins[1], g.clone())?;
            }
            Op::Mul => {
                if self.nodes[ins[0].0].needs_grad {
                    let data: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(ins[1]).data())
                        .map(|(&gi, &b)| gi * b)
                        .collect();
                    self.accumulate(grads, ins[0], Tensor::from_vec(g.shape(), data)?)?;
                }
                if self.nodes[ins[1].0].needs_grad {
                    let data: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(ins[0]).data())
                        .map(|(&gi, &a)| gi * a)
                        .collect();
                    self.accumulate(grads, ins[1], Tensor::from_vec(g.shape(), data)?)?;
                }
            }
            Op::ClampRange { lo, hi } => {
                let xv = self.value(ins[0]).data();
                let data: Vec<S> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { S::zero() })
                    .collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(g.shape(), data)?)?;
            }
            Op::Film => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let xs = self.value(x).shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); c * hw];
                    for ch in 0..c {
                        let ga = gv[ch];
                        for (dxi, gi) in
                            dx[ch * hw..(ch + 1) * hw].iter_mut().zip(&g.data()[ch * hw..(ch + 1) * hw])
                        {
                            *dxi = ga * *gi;
                        }
                    }
                    self.accumulate(grads, x, Tensor::from_vec(xs, dx)?)?;
                }
                if self.nodes[gamma.0].needs_grad {
                    let mut dg = vec![S::zero(); c];
                    for ch in 0..c {
                        let s: f64 = g.data()[ch * hw..(ch + 1) * hw]
                            .iter()
                            .zip(&xv[ch * hw..(ch + 1) * hw])
                            .map(|(gi, xi)| gi.as_f64() * xi.as_f64())
                            .sum();
                        dg[ch] = S::from_f64(s);
                    }
                    self.accumulate(grads, gamma, Tensor::from_vec(&[c], dg)?)?;
                }
                if self.nodes[beta.0].needs_grad {
                    let mut db = vec![S::zero(); c];
                    for ch in 0..c {
                        let s: f64 =
                            g.data()[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).sum();
                        db[ch] = S::from_f64(s);
                    }
                    self.accumulate(grads, beta, Tensor::from_vec(&[c], db)?)?;
                }
            }
            Op::MseMean => {
                let n = self.value(ins[0]).numel() as f64;
                let seed = g.item().as_f64();
                let av = self.value(ins[0]).data();
                let bv = self.value(ins[1]).data();
                if self.nodes[ins[0].0].needs_grad {
                    let da: Vec<S> = av
                        .iter()
                        .zip(bv)
                        .map(|(&a, &b)| S::from_f64(2.0 * (a.as_f64() - b.as_f64()) / n * seed))
                        .collect();
                    self.accumulate(grads, ins[0], Tensor::from_vec(self.value(ins[0]).shape(), da)?)?;
                }
                if self.nodes[ins[1].0].needs_grad {
                    let db: Vec<S> = av
                        .iter()
                        .zip(bv)
                        .map(|(&a, &b)| S::from_f64(-2.0 * (a.as_f64() - b.as_f64()) / n * seed))
                        .collect();
                    self.accumulate(grads, ins[1], Tensor::from_vec(self.value(ins[1]).shape(), db)?)?;
                }
            }
            Op::BceWithLogitsMean { targets } => {
                let n = targets.len() as f64;
                let seed = g.item().as_f64();
                let zv = self.value(ins[0]).data();
                let dz: Vec<S> = zv
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| S::from_f64((sigmoid64(z.as_f64()) - t) / n * seed))
                    .collect();
                self.accumulate(grads, ins[0], Tensor::from_vec(self.value(ins[0]).shape(), dz)?)?;
            }
            Op::WeightedSum { coefs } => {
                let seed = g.item().as_f64();
                for (input, &c) in ins.iter().zip(coefs) {
                    if c != 0.0 {
                        self.accumulate(grads, *input, Tensor::scalar(S::from_f64(c * seed)))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        id: usize,
        g: &Tensor<S>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (c, h, wid) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let os = node.value.shape();
        let (ho, wo) = (os[1], os[2]);
        let k = c * kh * kw;
        let m = ho * wo;

        if self.nodes[w.0].needs_grad {
            // dW = dY x colsT
            let mut cols = vec![S::zero(); k * m];
            im2col(self.value(x).data(), c, h, wid, kh, kw, stride, pad, ho, wo, &mut cols);
            let mut dw = vec![S::zero(); cout * k];
            S::gemm(
                cout,
                m,
                k,
                S::one(),
                g.data(),
                m as isize,
                1,
                &cols,
                1,
                m as isize,
                S::zero(),
                &mut dw,
            );
            self.accumulate(grads, w, Tensor::from_vec(&ws, dw)?)?;
        }
        if self.nodes[b.0].needs_grad {
            let db: Vec<S> = (0..cout)
                .map(|co| {
                    S::from_f64(g.data()[co * m..(co + 1) * m].iter().map(|v| v.as_f64()).sum())
                })
                .collect();
            self.accumulate(grads, b, Tensor::from_vec(&[cout], db)?)?;
        }
        if self.nodes[x.0].needs_grad {
            // dcols = WT x dY, then scatter back
            let mut dcols = vec![S::zero(); k * m];
            S::gemm(
                k,
                cout,
                m,
                S::one(),
                self.value(w).data(),
                1,
                k as isize,
                g.data(),
                m as isize,
                1,
                S::zero(),
                &mut dcols,
            );
            let mut dx = vec![S::zero(); c * h * wid];
            col2im(&dcols, c, h, wid, kh, kw, stride, pad, ho, wo, &mut dx);
            self.accumulate(grads, x, Tensor::from_vec(&xs, dx)?)?;
        }
        Ok(())
    }

    fn convt2d_backward(
        &self,
        id: usize,
        g: &Tensor<S>,
        stride: usize,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (c, h, wid) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let os = node.value.shape();
        let (ho, wo) = (os[1], os[2]);
        let q = cout * kh * kw;
        let hw = h * wid;

        // Gathering dY back through the scatter gives dcols[q, hw].
        let mut dcols = vec![S::zero(); q * hw];
        im2col(g.data(), cout, ho, wo, kh, kw, stride, 0, h, wid, &mut dcols);

        if self.nodes[x.0].needs_grad {
            let mut dx = vec![S::zero(); c * hw];
            S::gemm(
                c,
                q,
                hw,
                S::one(),
                self.value(w).data(),
                q as isize,
                1,
                &dcols,
                hw as isize,
                1,
                S::zero(),
                &mut dx,
            );
            self.accumulate(grads, x, Tensor::from_vec(&xs, dx)?)?;
        }
        if self.nodes[w.0].needs_grad {
            // dW[c, q] = x[c, hw] x dcolsT[hw, q]
            let mut dw = vec![S::zero(); c * q];
            S::gemm(
                c,
                hw,
                q,
                S::one(),
                self.value(x).data(),
                hw as isize,
                1,
                &dcols,
                1,
                hw as isize,
                S::zero(),
                &mut dw,
            );
            self.accumulate(grads, w, Tensor::from_vec(&ws, dw)?)?;
        }
        if self.nodes[b.0].needs_grad {
            let mo = ho * wo;
            let db: Vec<S> = (0..cout)
                .map(|co| {
                    S::from_f64(g.data()[co * mo..(co + 1) * mo].iter().map(|v| v.as_f64()).sum())
                })
                .collect();
            self.accumulate(grads, b, Tensor::from_vec(&[cout], db)?)?;
        }
        Ok(())
    }
}

#[inline]
fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvT2d { .. } => "conv_transpose2d",
        Op::Linear => "linear",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Sigmoid => "sigmoid",
        Op::Tanh => "tanh",
        Op::InstanceNorm => "instance_norm",
        Op::GlobalAvgPool => "global_avg_pool",
        Op::ConcatChannels => "concat_channels",
        Op::Add => "add",
        Op::Mul => "mul",
        Op::ClampRange { .. } => "clamp",
        Op::Film => "film",
        Op::MseMean => "mse_mean",
        Op::BceWithLogitsMean { .. } => "bce_with_logits_mean",
        Op::WeightedSum { .. } => "weighted_sum",
    }
}

/// Gathers `x` [C,H,W] into `cols` [C*kh*kw, Ho*Wo] for a convolution with
/// the given stride and zero padding. Out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let m = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * m;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oh * wo..row + (oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        for v in dst.iter_mut() {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let src_row = (ci * h + ih as usize) * w;
                    // Valid ow range: 0 <= ow*stride + kj - pad < w
                    let off = kj as isize - pad as isize;
                    let ow_lo = if off >= 0 {
                        0
                    } else {
                        ((-off) as usize + stride - 1) / stride
                    };
                    let ow_hi = {
                        let lim = w as isize - 1 - off;
                        if lim < 0 {
                            0
                        } else {
                            (wo).min(lim as usize / stride + 1)
                        }
                    };
                    for v in dst[..ow_lo.min(wo)].iter_mut() {
                        *v = S::zero();
                    }
                    if stride == 1 && ow_hi > ow_lo {
                        let iw0 = (ow_lo * stride) as isize + off;
                        let src = &x[src_row + iw0 as usize..src_row + iw0 as usize + (ow_hi - ow_lo)];
                        dst[ow_lo..ow_hi].copy_from_slice(src);
                    } else {
                        for ow in ow_lo..ow_hi {
                            let iw = (ow * stride) as isize + off;
                            dst[ow] = x[src_row + iw as usize];
                        }
                    }
                    for v in dst[ow_hi.max(ow_lo)..].iter_mut() {
                        *v = S::zero();
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: accumulates `cols` back into an
/// image-shaped buffer `out` [C,H,W].
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [S],
) {
    debug_assert_eq!(out.len(), c * h * w);
    let m = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * m;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + ih as usize) * w;
                    let src = &cols[row + oh * wo..row + (oh + 1) * wo];
                    let off = kj as isize - pad as isize;
                    let ow_lo = if off >= 0 {
                        0
                    } else {
                        ((-off) as usize + stride - 1) / stride
                    };
                    let ow_hi = {
                        let lim = w as isize - 1 - off;
                        if lim < 0 {
                            0
                        } else {
                            (wo).min(lim as usize / stride + 1)
                        }
                    };
                    for ow in ow_lo..ow_hi {
                        let iw = (ow * stride) as isize + off;
                        out[dst_row + iw as usize] = out[dst_row + iw as usize] + src[ow];
                    }
                }
            }
        }
    }
}
