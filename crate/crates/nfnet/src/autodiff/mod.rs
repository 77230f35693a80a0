//! Reverse-mode differentiation over tensor operations.
//!
//! A define-by-run tape records one node per operation; each node keeps the
//! forward value and whatever the backward rule needs. Gradients are
//! accumulated by a single reverse sweep. Everything on a tape is double
//! precision.
//!
//! Weight standardization is itself a tape operation, so its backward
//! accounts for the dependence of the row statistics on the underlying
//! weight rather than treating the standardized weight as the parameter.

pub mod check;
pub mod train;

use crate::error::{Error, Result};
use crate::ops::{ActivationKind, ConvSpec};
use crate::tensor::{Dtype, Shape, Tensor};
use rayon::prelude::*;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: Option<String> },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec },
    WsStandardize { w: NodeId, gain: NodeId, eps: f64 },
    Activation { x: NodeId, kind: ActivationKind, scaled: bool },
    BatchNorm { x: NodeId, inv_std: Vec<f64> },
    AvgPool { x: NodeId, k: usize },
    GlobalAvgPool { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    MulChannelGate { x: NodeId, gate: NodeId },
    ScaleConst { x: NodeId, s: f64 },
    ScaleByScalar { x: NodeId, s: NodeId },
    MulMask { x: NodeId, mask: Tensor },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    Sum { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient tape. One tape per forward pass; not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert_eq!(value.dtype(), Dtype::Double, "tape values are f64");
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn require_double(t: &Tensor, site: &'static str) -> Result<()> {
        if t.dtype() != Dtype::Double {
            return Err(Error::DtypeMismatch { site, a: Dtype::Double, b: t.dtype() });
        }
        Ok(())
    }

    /// Named parameter leaf; named leaves get non-finite gradient checks.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        Self::require_double(&value, "leaf")?;
        Ok(self.push(value, Op::Leaf { name: Some(name.into()) }))
    }

    /// Unnamed constant/input leaf.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        Self::require_double(&value, "input")?;
        Ok(self.push(value, Op::Leaf { name: None }))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let out = crate::ops::conv2d(
            &self.nodes[x].value,
            &self.nodes[w].value,
            bias.map(|b| &self.nodes[b].value),
            &spec,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, bias, spec }))
    }

    pub fn ws_standardize(&mut self, w: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[w].value.shape();
        if shape.h * shape.w * shape.c < 2 {
            return Err(Error::invalid("ws_standardize needs fan_in >= 2"));
        }
        let out = crate::ws::standardize_weight_raw(&self.nodes[w].value, &self.nodes[gain].value, eps);
        Ok(self.push(out, Op::WsStandardize { w, gain, eps }))
    }

    pub fn activation(&mut self, x: NodeId, kind: ActivationKind, scaled: bool) -> NodeId {
        let out = crate::ops::activation(&self.nodes[x].value, kind, scaled);
        self.push(out, Op::Activation { x, kind, scaled })
    }

    pub fn batch_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let vars = crate::tensor::channel_variances(v);
        let inv_std: Vec<f64> = vars.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();
        let out = crate::ops::batch_norm_stats(v, eps)?;
        Ok(self.push(out, Op::BatchNorm { x, inv_std }))
    }

    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let out = crate::ops::avg_pool2d(&self.nodes[x].value, k)?;
        Ok(self.push(out, Op::AvgPool { x, k }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let out = crate::ops::global_avg_pool(&self.nodes[x].value);
        self.push(out, Op::GlobalAvgPool { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = crate::ops::sigmoid(&self.nodes[x].value);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul_channel_gate(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let out = crate::ops::mul_channel_gate(&self.nodes[x].value, &self.nodes[gate].value)?;
        Ok(self.push(out, Op::MulChannelGate { x, gate }))
    }

    pub fn scale_const(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.nodes[x].value.scale(s);
        self.push(out, Op::ScaleConst { x, s })
    }

    /// Multiply by a learnable scalar parameter of shape (1,1,1,1).
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.len() != 1 {
            return Err(Error::invalid("scale_by_scalar expects a single-element tensor"));
        }
        let sv = self.nodes[s].value.get(0);
        let out = self.nodes[x].value.scale(sv);
        Ok(self.push(out, Op::ScaleByScalar { x, s }))
    }

    /// Elementwise product with a constant mask (dropout, stochastic depth).
    pub fn mul_mask(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        let out = self.nodes[x].value.zip_with(&mask, |a, b| a * b)?;
        Ok(self.push(out, Op::MulMask { x, mask }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::ops::linear(&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy over the batch; returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        let s = lv.shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::invalid("softmax_cross_entropy expects (n,1,1,classes) logits"));
        }
        if labels.len() != s.n {
            return Err(Error::invalid("labels length != batch size"));
        }
        let classes = s.c;
        let mut probs = Tensor::zeros(s, Dtype::Double);
        let mut loss = 0.0f64;
        for n in 0..s.n {
            if labels[n] >= classes {
                return Err(Error::invalid(format!("label {} >= classes {classes}", labels[n])));
            }
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..classes {
                maxv = maxv.max(lv.at(n, 0, 0, c));
            }
            let mut denom = 0.0f64;
            for c in 0..classes {
                denom += (lv.at(n, 0, 0, c) - maxv).exp();
            }
            let log_denom = denom.ln() + maxv;
            for c in 0..classes {
                probs.set_at(n, 0, 0, c, (lv.at(n, 0, 0, c) - log_denom).exp());
            }
            loss -= lv.at(n, 0, 0, labels[n]) - log_denom;
        }
        loss /= s.n as f64;
        let value = Tensor::from_f64(Shape::new(1, 1, 1, 1), vec![loss]);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.to_f64_vec().iter().sum();
        let value = Tensor::from_f64(Shape::new(1, 1, 1, 1), vec![s]);
        self.push(value, Op::Sum { x })
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient slot per
    /// node; named leaves are checked for non-finite gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss].value;
        if lv.len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss node"));
        }
        if !lv.get(0).is_finite() {
            return Err(Error::NonFinite { site: "loss".into() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::from_f64(Shape::new(1, 1, 1, 1), vec![1.0]));

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(dy); // keep for extraction
                    continue;
                }
                Op::Conv2d { x, w, bias, spec } => {
                    let (dx, dw, db) =
                        conv2d_backward(&dy, &self.nodes[*x].value, &self.nodes[*w].value, spec);
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*w], dw);
                    if let Some(b) = bias {
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::WsStandardize { w, gain, eps } => {
                    let (dw, dg) = ws_backward(&dy, &self.nodes[*w].value, &self.nodes[*gain].value, *eps);
                    accumulate(&mut grads[*w], dw);
                    accumulate(&mut grads[*gain], dg);
                }
                Op::Activation { x, kind, scaled } => {
                    let xin = &self.nodes[*x].value;
                    let scale = if *scaled { 1.0 / kind.sigma_g() } else { 1.0 };
                    let kind = *kind;
                    let dx = dy
                        .zip_with(xin, move |g, v| g * kind.derivative(v) * scale)
                        .expect("activation shapes match");
                    accumulate(&mut grads[*x], dx);
                }
                Op::BatchNorm { x, inv_std } => {
                    let dx = batch_norm_backward(&dy, &self.nodes[idx].value, inv_std);
                    accumulate(&mut grads[*x], dx);
                }
                Op::AvgPool { x, k } => {
                    let dx = avg_pool_backward(&dy, self.nodes[*x].value.shape(), *k);
                    accumulate(&mut grads[*x], dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.nodes[*x].value.shape();
                    let inv = 1.0 / (xs.h * xs.w) as f64;
                    let mut dx = Tensor::zeros(xs, Dtype::Double);
                    for n in 0..xs.n {
                        for h in 0..xs.h {
                            for w in 0..xs.w {
                                for c in 0..xs.c {
                                    dx.set_at(n, h, w, c, dy.at(n, 0, 0, c) * inv);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::Sigmoid { x } => {
                    let yv = &self.nodes[idx].value;
                    let dx = dy
                        .zip_with(yv, |g, s| g * s * (1.0 - s))
                        .expect("sigmoid shapes match");
                    accumulate(&mut grads[*x], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], dy.clone());
                    accumulate(&mut grads[*b], dy);
                }
                Op::MulChannelGate { x, gate } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gate].value;
                    let xs = xv.shape();
                    let mut dx = Tensor::zeros(xs, Dtype::Double);
                    let mut dg = Tensor::zeros(gv.shape(), Dtype::Double);
                    for n in 0..xs.n {
                        for h in 0..xs.h {
                            for w in 0..xs.w {
                                for c in 0..xs.c {
                                    let g = dy.at(n, h, w, c);
                                    dx.set_at(n, h, w, c, g * gv.at(n, 0, 0, c));
                                    let cur = dg.at(n, 0, 0, c);
                                    dg.set_at(n, 0, 0, c, cur + g * xv.at(n, h, w, c));
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*gate], dg);
                }
                Op::ScaleConst { x, s } => {
                    accumulate(&mut grads[*x], dy.scale(*s));
                }
                Op::ScaleByScalar { x, s } => {
                    let sv = self.nodes[*s].value.get(0);
                    let xv = &self.nodes[*x].value;
                    let ds: f64 = dy
                        .to_f64_vec()
                        .iter()
                        .zip(xv.to_f64_vec().iter())
                        .map(|(g, v)| g * v)
                        .sum();
                    accumulate(&mut grads[*x], dy.scale(sv));
                    accumulate(
                        &mut grads[*s],
                        Tensor::from_f64(Shape::new(1, 1, 1, 1), vec![ds]),
                    );
                }
                Op::MulMask { x, mask } => {
                    let dx = dy.zip_with(mask, |g, m| g * m).expect("mask shape matches");
                    accumulate(&mut grads[*x], dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let xs = xv.shape();
                    let ws = wv.shape();
                    let mut dx = Tensor::zeros(xs, Dtype::Double);
                    let mut dw = Tensor::zeros(ws, Dtype::Double);
                    let mut db = Tensor::zeros(self.nodes[*b].value.shape(), Dtype::Double);
                    for n in 0..xs.n {
                        for o in 0..ws.n {
                            let g = dy.at(n, 0, 0, o);
                            db.set(o, db.get(o) + g);
                            for c in 0..xs.c {
                                dx.set_at(n, 0, 0, c, dx.at(n, 0, 0, c) + g * wv.at(o, 0, 0, c));
                                dw.set_at(o, 0, 0, c, dw.at(o, 0, 0, c) + g * xv.at(n, 0, 0, c));
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*w], dw);
                    accumulate(&mut grads[*b], db);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let g = dy.get(0);
                    let s = probs.shape();
                    let inv_n = 1.0 / s.n as f64;
                    let mut dl = probs.scale(g * inv_n);
                    for (n, &label) in labels.iter().enumerate() {
                        let i = s.index(n, 0, 0, label);
                        dl.set(i, dl.get(i) - g * inv_n);
                    }
                    accumulate(&mut grads[*logits], dl);
                }
                Op::Sum { x } => {
                    let xs = self.nodes[*x].value.shape();
                    accumulate(&mut grads[*x], Tensor::filled(xs, dy.get(0), Dtype::Double));
                }
            }
        }

        // Non-finite gradients on named parameters are reported by name.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = &grads[i] {
                    if !g.is_all_finite() {
                        return Err(Error::NonFiniteGradient { name: name.clone() });
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => *t = t.add(&delta).expect("gradient shapes match"),
        None => *slot = Some(delta),
    }
}

// ---------------------------------------------------------------------------
// Backward kernels
// ---------------------------------------------------------------------------

fn conv2d_backward(dy: &Tensor, x: &Tensor, w: &Tensor, spec: &ConvSpec) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ys = dy.shape();
    let k = spec.kernel;
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let pad = spec.padding as isize;
    let stride = spec.stride;

    let dyv = dy.to_f64_vec();
    let xv = x.to_f64_vec();
    let wv = w.to_f64_vec();

    // d/dx: scatter per batch sample (independent across n).
    let per_n = xs.h * xs.w * xs.c;
    let mut dx = vec![0.0f64; xs.count()];
    dx.par_chunks_mut(per_n).enumerate().for_each(|(b, dxb)| {
        for oy in 0..ys.h {
            for ox in 0..ys.w {
                for g in 0..spec.groups {
                    for ocg in 0..cout_g {
                        let oc = g * cout_g + ocg;
                        let gy = dyv[((b * ys.h + oy) * ys.w + ox) * ys.c + oc];
                        if gy == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let xbase = ((iy as usize) * xs.w + ix as usize) * xs.c + g * cin_g;
                                let wbase = ((oc * k + ky) * k + kx) * cin_g;
                                for ci in 0..cin_g {
                                    dxb[xbase + ci] += gy * wv[wbase + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // d/dw: one task per output channel.
    let fan = k * k * cin_g;
    let mut dw = vec![0.0f64; w.len()];
    dw.par_chunks_mut(fan).enumerate().for_each(|(oc, dwoc)| {
        let g = oc / cout_g;
        for b in 0..xs.n {
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let gy = dyv[((b * ys.h + oy) * ys.w + ox) * ys.c + oc];
                    if gy == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            let xbase =
                                ((b * xs.h + iy as usize) * xs.w + ix as usize) * xs.c + g * cin_g;
                            let wbase = (ky * k + kx) * cin_g;
                            for ci in 0..cin_g {
                                dwoc[wbase + ci] += gy * xv[xbase + ci];
                            }
                        }
                    }
                }
            }
        }
    });

    // d/dbias.
    let mut db = vec![0.0f64; spec.out_ch];
    for b in 0..ys.n {
        for oy in 0..ys.h {
            for ox in 0..ys.w {
                let base = ((b * ys.h + oy) * ys.w + ox) * ys.c;
                for oc in 0..spec.out_ch {
                    db[oc] += dyv[base + oc];
                }
            }
        }
    }

    (
        Tensor::from_f64(xs, dx),
        Tensor::from_f64(w.shape(), dw),
        Tensor::from_f64(Shape::new(1, 1, 1, spec.out_ch), db),
    )
}

/// Backward of `w_hat = gain * (w - mu) / sqrt(var*N + eps)` per output
/// channel. With `u` the upstream gradient on a row,
///
///   d/dw  = gain/sqrt(v) * (u - mean(u))  -  gain/v^(3/2) * (w-mu) * sum(u*(w-mu))
///   d/dgain = sum(u * (w-mu)/sqrt(v))
///
/// where `v = var*N + eps`. The centering projects out the mean of `u` and
/// the normalization projects out the component along `w - mu`.
fn ws_backward(dy: &Tensor, w: &Tensor, gain: &Tensor, eps: f64) -> (Tensor, Tensor) {
    let shape = w.shape();
    let fan = shape.h * shape.w * shape.c;
    let n = fan as f64;
    let mut dw = Tensor::zeros(shape, Dtype::Double);
    let mut dg = Tensor::zeros(gain.shape(), Dtype::Double);
    for o in 0..shape.n {
        let base = o * fan;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..fan {
            let v = w.get(base + i);
            sum += v;
            sum_sq += v * v;
        }
        let mu = sum / n;
        let var = (sum_sq / n - mu * mu).max(0.0);
        let v = var * n + eps;
        let inv_sqrt_v = 1.0 / v.sqrt();
        let g = gain.get(o);

        let mut u_sum = 0.0;
        let mut u_dot_c = 0.0; // sum(u * (w - mu))
        for i in 0..fan {
            let u = dy.get(base + i);
            u_sum += u;
            u_dot_c += u * (w.get(base + i) - mu);
        }
        let u_mean = u_sum / n;

        for i in 0..fan {
            let u = dy.get(base + i);
            let c = w.get(base + i) - mu;
            let d = g * inv_sqrt_v * (u - u_mean) - g * inv_sqrt_v / v * c * u_dot_c;
            dw.set(base + i, d);
        }
        dg.set(o, u_dot_c * inv_sqrt_v);
    }
    (dw, dg)
}

/// Backward through per-channel batch normalization with saved 1/std:
/// `dx = inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat))` per channel.
fn batch_norm_backward(dy: &Tensor, x_hat: &Tensor, inv_std: &[f64]) -> Tensor {
    let s = x_hat.shape();
    let m = (s.n * s.h * s.w) as f64;
    let c = s.c;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for i in 0..x_hat.len() {
        let ch = i % c;
        sum_dy[ch] += dy.get(i);
        sum_dy_xhat[ch] += dy.get(i) * x_hat.get(i);
    }
    let mut dx = Tensor::zeros(s, Dtype::Double);
    for i in 0..x_hat.len() {
        let ch = i % c;
        let d = inv_std[ch] * (dy.get(i) - sum_dy[ch] / m - x_hat.get(i) * sum_dy_xhat[ch] / m);
        dx.set(i, d);
    }
    dx
}

fn avg_pool_backward(dy: &Tensor, xs: Shape, k: usize) -> Tensor {
    let inv = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(xs, Dtype::Double);
    let ys = dy.shape();
    for n in 0..ys.n {
        for oy in 0..ys.h {
            for ox in 0..ys.w {
                for c in 0..ys.c {
                    let g = dy.at(n, oy, ox, c) * inv;
                    for dy_ in 0..k {
                        for dx_ in 0..k {
                            dx.set_at(n, oy * k + dy_, ox * k + dx_, c, g);
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Taped model forward
// ---------------------------------------------------------------------------

use crate::blocks::{BnOrdering, Mode, ShortcutStyle};
use crate::models::{BlockParams, Model, ModelKind};
use crate::tensor::RngStream;
use crate::ws::StandardizedConv;

pub struct TapedForward {
    pub logits: NodeId,
    /// (parameter path, leaf id), in [`Model::visit_params`] order.
    pub params: Vec<(String, NodeId)>,
}

struct ConvLeaves {
    w: NodeId,
    gain: Option<NodeId>,
    bias: Option<NodeId>,
    spec: ConvSpec,
    eps: f64,
}

/// Create the leaves of one convolution in visit_params order.
fn leaf_conv(
    tape: &mut Tape,
    params: &mut Vec<(String, NodeId)>,
    name: &str,
    conv: &StandardizedConv,
) -> Result<ConvLeaves> {
    let w = tape.leaf(format!("{name}.weight"), conv.weight.to_dtype(Dtype::Double))?;
    params.push((format!("{name}.weight"), w));
    let gain = if conv.standardize {
        let g = tape.leaf(format!("{name}.gain"), conv.gain.to_dtype(Dtype::Double))?;
        params.push((format!("{name}.gain"), g));
        Some(g)
    } else {
        None
    };
    let bias = match &conv.bias {
        Some(b) => {
            let bid = tape.leaf(format!("{name}.bias"), b.to_dtype(Dtype::Double))?;
            params.push((format!("{name}.bias"), bid));
            Some(bid)
        }
        None => None,
    };
    Ok(ConvLeaves { w, gain, bias, spec: conv.spec, eps: conv.eps })
}

fn apply_conv(tape: &mut Tape, leaves: &ConvLeaves, x: NodeId) -> Result<NodeId> {
    let eff = match leaves.gain {
        Some(g) => tape.ws_standardize(leaves.w, g, leaves.eps)?,
        None => leaves.w,
    };
    tape.conv2d(x, eff, leaves.bias, leaves.spec)
}

/// Differentiable forward pass of a model. Parameters become named leaves in
/// the same order as [`Model::visit_params`]; stochastic draws (stochastic
/// depth, dropout) come from `rng` exactly as in the plain forward.
pub fn taped_model_forward(
    tape: &mut Tape,
    model: &Model,
    x: &Tensor,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<TapedForward> {
    let mut params = Vec::new();
    let x = tape.input(x.to_dtype(Dtype::Double))?;
    let stem = leaf_conv(tape, &mut params, "stem", &model.stem)?;
    let mut h = apply_conv(tape, &stem, x)?;

    for (i, (meta, block)) in model.blocks.iter().enumerate() {
        match block {
            BlockParams::Nf(p) => {
                // Leaves first, in visit_params order.
                let c1 = leaf_conv(tape, &mut params, &format!("block{i}.conv1x1a"), &p.conv1x1a)?;
                let c2 = leaf_conv(tape, &mut params, &format!("block{i}.conv3x3"), &p.conv3x3)?;
                let c3 = leaf_conv(tape, &mut params, &format!("block{i}.conv1x1b"), &p.conv1x1b)?;
                let sc_leaves = match &p.shortcut {
                    Some((sc, style)) => {
                        Some((leaf_conv(tape, &mut params, &format!("block{i}.shortcut"), sc)?, *style))
                    }
                    None => None,
                };
                let se_leaves = match &p.se {
                    Some(se) => {
                        let w0 = tape.leaf(format!("block{i}.se.w0"), se.w0.to_dtype(Dtype::Double))?;
                        params.push((format!("block{i}.se.w0"), w0));
                        let b0 = tape.leaf(format!("block{i}.se.b0"), se.b0.to_dtype(Dtype::Double))?;
                        params.push((format!("block{i}.se.b0"), b0));
                        let w1 = tape.leaf(format!("block{i}.se.w1"), se.w1.to_dtype(Dtype::Double))?;
                        params.push((format!("block{i}.se.w1"), w1));
                        let b1 = tape.leaf(format!("block{i}.se.b1"), se.b1.to_dtype(Dtype::Double))?;
                        params.push((format!("block{i}.se.b1"), b1));
                        Some((w0, b0, w1, b1, se.channels, se.hidden))
                    }
                    None => None,
                };
                let gain = tape.leaf(
                    format!("block{i}.skipinit_gain"),
                    p.skipinit_gain.to_dtype(Dtype::Double),
                )?;
                params.push((format!("block{i}.skipinit_gain"), gain));

                // Wiring.
                let act = model.activation;
                let out = tape.activation(h, act, true);
                let out = tape.scale_const(out, 1.0 / meta.beta);
                let shortcut = match &sc_leaves {
                    Some((sc, ShortcutStyle::AvgPoolConv)) => {
                        let pooled = if p.stride > 1 { tape.avg_pool(out, p.stride)? } else { out };
                        apply_conv(tape, sc, pooled)?
                    }
                    Some((sc, ShortcutStyle::StridedConv)) => apply_conv(tape, sc, out)?,
                    None => h,
                };
                let b1 = apply_conv(tape, &c1, out)?;
                let b1 = tape.activation(b1, act, true);
                let b2 = apply_conv(tape, &c2, b1)?;
                let b2 = match se_leaves {
                    Some((w0, b0, w1, bb1, channels, hidden)) => {
                        let pooled = tape.global_avg_pool(b2);
                        let s0 = ConvSpec::new(channels, hidden, 1, 1, 0);
                        let s1 = ConvSpec::new(hidden, channels, 1, 1, 0);
                        let z = tape.conv2d(pooled, w0, Some(b0), s0)?;
                        let z = tape.activation(z, act, true);
                        let z = tape.conv2d(z, w1, Some(bb1), s1)?;
                        let z = tape.sigmoid(z);
                        let z = tape.scale_const(z, 2.0);
                        tape.mul_channel_gate(b2, z)?
                    }
                    None => b2,
                };
                let b3 = tape.activation(b2, act, true);
                let b4 = apply_conv(tape, &c3, b3)?;

                let gate = crate::blocks::stochastic_depth_gate(p.stochdepth_rate, mode, rng)?;
                let scaled = tape.scale_by_scalar(b4, gain)?;
                let scaled = tape.scale_const(scaled, model.alpha * gate);
                h = tape.add(shortcut, scaled)?;
            }
            BlockParams::Bn(p) => {
                let ordering = match model.kind {
                    ModelKind::BnResNet(o) => o,
                    _ => BnOrdering::BnReluConv,
                };
                let w1 = tape.leaf(format!("block{i}.conv1x1a.weight"), p.conv1x1a.weight.to_dtype(Dtype::Double))?;
                params.push((format!("block{i}.conv1x1a.weight"), w1));
                let w2 = tape.leaf(format!("block{i}.conv3x3.weight"), p.conv3x3.weight.to_dtype(Dtype::Double))?;
                params.push((format!("block{i}.conv3x3.weight"), w2));
                let w3 = tape.leaf(format!("block{i}.conv1x1b.weight"), p.conv1x1b.weight.to_dtype(Dtype::Double))?;
                params.push((format!("block{i}.conv1x1b.weight"), w3));
                let ws = match &p.shortcut {
                    Some(sc) => {
                        let id = tape.leaf(format!("block{i}.shortcut.weight"), sc.weight.to_dtype(Dtype::Double))?;
                        params.push((format!("block{i}.shortcut.weight"), id));
                        Some((id, sc.spec))
                    }
                    None => None,
                };
                let pre = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
                    Ok(match ordering {
                        BnOrdering::BnReluConv => {
                            let b = tape.batch_norm(x, p.eps)?;
                            tape.activation(b, ActivationKind::Relu, false)
                        }
                        BnOrdering::ReluBnConv => {
                            let r = tape.activation(x, ActivationKind::Relu, false);
                            tape.batch_norm(r, p.eps)?
                        }
                    })
                };
                let prev = pre(tape, h)?;
                let b1 = tape.conv2d(prev, w1, None, p.conv1x1a.spec)?;
                let p1 = pre(tape, b1)?;
                let b2 = tape.conv2d(p1, w2, None, p.conv3x3.spec)?;
                let p2 = pre(tape, b2)?;
                let b3 = tape.conv2d(p2, w3, None, p.conv1x1b.spec)?;
                let shortcut = match ws {
                    Some((id, spec)) => tape.conv2d(prev, id, None, spec)?,
                    None => h,
                };
                h = tape.add(shortcut, b3)?;
            }
        }
    }

    let pooled = match model.kind {
        ModelKind::NfRegNet => {
            let fc = model.final_conv.as_ref().expect("regnet has a final conv");
            let leaves = leaf_conv(tape, &mut params, "final_conv", fc)?;
            let f = apply_conv(tape, &leaves, h)?;
            let f = tape.activation(f, model.activation, true);
            tape.global_avg_pool(f)
        }
        ModelKind::NfResNet => {
            let a = tape.activation(h, model.activation, true);
            tape.global_avg_pool(a)
        }
        ModelKind::BnResNet(_) => {
            let b = tape.batch_norm(h, model.bn_eps)?;
            let a = tape.activation(b, ActivationKind::Relu, false);
            tape.global_avg_pool(a)
        }
    };
    let pooled = if model.dropout_rate > 0.0 && mode == Mode::Train {
        let ps = tape.value(pooled).shape();
        let keep_scale = 1.0 / (1.0 - model.dropout_rate);
        let mut mask = Tensor::zeros(ps, Dtype::Double);
        for i in 0..mask.len() {
            if !rng.next_bernoulli(model.dropout_rate) {
                mask.set(i, keep_scale);
            }
        }
        tape.mul_mask(pooled, mask)?
    } else {
        pooled
    };

    let cw = tape.leaf("classifier.weight", model.classifier_w.to_dtype(Dtype::Double))?;
    params.push(("classifier.weight".into(), cw));
    let cb = tape.leaf("classifier.bias", model.classifier_b.to_dtype(Dtype::Double))?;
    params.push(("classifier.bias".into(), cb));
    let logits = tape.linear(pooled, cw, cb)?;

    Ok(TapedForward { logits, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian;

    #[test]
    fn identity_conv_weight_gradient_matches_channel_sums() {
        // loss = sum(conv(x, w)) with a 1x1 identity kernel: d loss / d w[o, i]
        // equals the sum of input channel i over all positions.
        let spec = ConvSpec::new(3, 3, 1, 1, 0);
        let mut rng = RngStream::new(2);
        let x = gaussian(Shape::new(2, 4, 4, 3), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let eye = Tensor::from_fn(spec.weight_shape(), Dtype::Double, |o, _, _, i| {
            if o == i {
                1.0
            } else {
                0.0
            }
        });
        let mut tape = Tape::new();
        let xi = tape.input(x.clone()).unwrap();
        let wi = tape.leaf("w", eye).unwrap();
        let y = tape.conv2d(xi, wi, None, spec).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let dw = grads.wrt(wi).unwrap();

        for o in 0..3 {
            for i in 0..3 {
                let mut expected = 0.0;
                for n in 0..2 {
                    for h in 0..4 {
                        for w in 0..4 {
                            expected += x.at(n, h, w, i);
                        }
                    }
                }
                assert!((dw.at(o, 0, 0, i) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ws_gradient_is_orthogonal_to_ones_and_row() {
        // Row [1,-1], gain 1, eps 0: the backward output must be orthogonal
        // to the all-ones direction (centering) and to the centered row
        // (normalization).
        let w = Tensor::from_f64(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]);
        let gain = Tensor::from_f64(Shape::new(1, 1, 1, 1), vec![1.0]);
        let dy = Tensor::from_f64(Shape::new(1, 1, 1, 2), vec![0.3, 0.9]);
        let (dw, _) = ws_backward(&dy, &w, &gain, 0.0);
        let ones_dot = dw.get(0) + dw.get(1);
        let row_dot = dw.get(0) * 1.0 + dw.get(1) * (-1.0);
        assert!(ones_dot.abs() < 1e-12, "ones component {ones_dot}");
        assert!(row_dot.abs() < 1e-12, "row component {row_dot}");
    }

    #[test]
    fn skipinit_gradient_nonzero_at_zero_gain() {
        // With gain = 0 the block output equals the skip path, but the
        // product rule still feeds a generically nonzero gradient to the gain.
        let mut tape = Tape::new();
        let mut rng = RngStream::new(3);
        let h = gaussian(Shape::new(1, 2, 2, 2), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let hid = tape.input(h).unwrap();
        let g = tape.leaf("gain", Tensor::zeros(Shape::new(1, 1, 1, 1), Dtype::Double)).unwrap();
        let scaled = tape.scale_by_scalar(hid, g).unwrap();
        let loss = tape.sum(scaled);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(g).unwrap().get(0).abs() > 1e-6);
    }

    #[test]
    fn bn_input_gradient_sums_to_zero_per_channel() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(5);
        let x = gaussian(Shape::new(2, 4, 4, 3), 0.4, 1.3, &mut rng, Dtype::Double).unwrap();
        let xi = tape.leaf("x", x).unwrap();
        let y = tape.batch_norm(xi, 1e-5).unwrap();
        // Non-symmetric loss so per-channel sums are a real test.
        let act = tape.activation(y, ActivationKind::Silu, false);
        let loss = tape.sum(act);
        let grads = tape.backward(loss).unwrap();
        let dx = grads.wrt(xi).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        s += dx.at(n, h, w, c);
                    }
                }
            }
            assert!(s.abs() < 1e-8, "channel {c} gradient sum {s}");
        }
    }

    #[test]
    fn ws_backward_differs_from_ignoring_the_parameterization() {
        // The shortcut implementation applies the conv gradient directly to
        // the underlying weight; the true backward projects it. They must
        // disagree on a generic instance.
        let spec = ConvSpec::new(4, 2, 1, 1, 0);
        let mut rng = RngStream::new(8);
        let sc = crate::ws::StandardizedConv::scaled_ws(spec, &mut rng, Dtype::Double).unwrap();
        let x = gaussian(Shape::new(2, 3, 3, 4), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();

        let mut tape = Tape::new();
        let xi = tape.input(x.clone()).unwrap();
        let w = tape.leaf("w", sc.weight.clone()).unwrap();
        let g = tape.leaf("g", sc.gain.clone()).unwrap();
        let ws = tape.ws_standardize(w, g, sc.eps).unwrap();
        let y = tape.conv2d(xi, ws, None, spec).unwrap();
        let loss = tape.sum(y);
        let full = tape.backward(loss).unwrap();
        let dw_full = full.wrt(w).unwrap().clone();

        // Shortcut: treat the standardized weight as the leaf.
        let mut tape2 = Tape::new();
        let xi2 = tape2.input(x).unwrap();
        let what = tape2.leaf("what", crate::ws::standardize_weight(&sc)).unwrap();
        let y2 = tape2.conv2d(xi2, what, None, spec).unwrap();
        let loss2 = tape2.sum(y2);
        let cut = tape2.backward(loss2).unwrap();
        let dw_cut = cut.wrt(what).unwrap().clone();

        let diff: f64 = dw_full
            .to_f64_vec()
            .iter()
            .zip(dw_cut.to_f64_vec().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "projected and naive gradients coincide: {diff}");
    }
}
