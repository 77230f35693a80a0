//! Forward operators: direct NHWC convolution, pooling, batch-statistics
//! normalization, scaled nonlinearities, squeeze-excite, and the linear head.
//!
//! Convolution is implemented directly (no im2col) with the channel axis
//! contiguous in both activations and weights, so the inner dot product
//! vectorizes. Shapes here are desk-scale by design.

use crate::error::{Error, Result};
use crate::tensor::{gaussian, Dtype, Element, RngStream, Shape, Storage, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Square-kernel, zero-padded, optionally grouped convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> ConvSpec {
        ConvSpec { in_ch, out_ch, kernel, stride, padding, groups: 1 }
    }

    pub fn grouped(mut self, groups: usize) -> ConvSpec {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::invalid(format!("degenerate conv spec {self:?}")));
        }
        if self.groups == 0 || self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::invalid(format!(
                "groups {} must divide in_ch {} and out_ch {}",
                self.groups, self.in_ch, self.out_ch
            )));
        }
        Ok(())
    }

    /// Weights feeding one output unit: (in_ch/groups) * k^2.
    pub fn fan_in(&self) -> usize {
        (self.in_ch / self.groups) * self.kernel * self.kernel
    }

    /// Weight tensor layout: (out_ch, k, k, in_ch/groups).
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_ch, self.kernel, self.kernel, self.in_ch / self.groups)
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |d: usize| -> Result<usize> {
            let padded = d + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::invalid(format!(
                    "input extent {d} too small for kernel {} with padding {}",
                    self.kernel, self.padding
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }
}

/// Dot product with eight independent accumulator lanes; the split keeps the
/// FMA chains latency-bound code out of the hot path.
#[inline]
fn dot<E: Element>(xs: &[E], ws: &[E]) -> f64 {
    let n = xs.len();
    let chunks = n / 8;
    let mut acc = [E::from_f64(0.0); 8];
    for i in 0..chunks {
        let x = &xs[i * 8..i * 8 + 8];
        let w = &ws[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] = E::from_f64(acc[l].to_f64() + x[l].to_f64() * w[l].to_f64());
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 8..n {
        tail += xs[i].to_f64() * ws[i].to_f64();
    }
    acc.iter().map(|a| a.to_f64()).sum::<f64>() + tail
}

#[allow(clippy::too_many_arguments)]
fn conv2d_kernel<E: Element>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    xs: Shape,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let k = spec.kernel;
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let pad = spec.padding as isize;
    let stride = spec.stride;
    let mut out = vec![E::from_f64(0.0); xs.n * oh * ow * spec.out_ch];

    // One parallel task per (batch, output row).
    out.par_chunks_mut(ow * spec.out_ch)
        .enumerate()
        .for_each(|(chunk, orow)| {
            let b = chunk / oh;
            let oy = chunk % oh;
            for ox in 0..ow {
                for g in 0..spec.groups {
                    for ocg in 0..cout_g {
                        let oc = g * cout_g + ocg;
                        let mut acc = 0.0f64;
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
                                let xbase = ((b * xs.h + iy as usize) * xs.w + ix as usize) * xs.c
                                    + g * cin_g;
                                let wbase = ((oc * k + ky) * k + kx) * cin_g;
                                acc += dot(&x[xbase..xbase + cin_g], &w[wbase..wbase + cin_g]);
                            }
                        }
                        if let Some(bv) = bias {
                            acc += bv[oc].to_f64();
                        }
                        orow[ox * spec.out_ch + oc] = E::from_f64(acc);
                    }
                }
            }
        });
    out
}

/// Zero-padded strided grouped convolution. Grouped channels are partitioned
/// contiguously: group `g` reads input channels `[g*cin_g, (g+1)*cin_g)` and
/// writes output channels `[g*cout_g, (g+1)*cout_g)`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let xs = x.shape();
    if xs.c != spec.in_ch {
        return Err(Error::ShapeMismatch {
            site: "conv2d input channels",
            expected: Shape::new(xs.n, xs.h, xs.w, spec.in_ch),
            got: xs,
        });
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            site: "conv2d weight",
            expected: spec.weight_shape(),
            got: w.shape(),
        });
    }
    if let Some(b) = bias {
        if b.len() != spec.out_ch {
            return Err(Error::invalid(format!(
                "bias length {} != out_ch {}",
                b.len(),
                spec.out_ch
            )));
        }
    }
    let (oh, ow) = spec.out_spatial(xs.h, xs.w)?;
    let oshape = Shape::new(xs.n, oh, ow, spec.out_ch);
    match (&x.data, &w.data) {
        (Storage::F32(xv), Storage::F32(wv)) => {
            let bv = match bias {
                Some(b) => Some(b.f32s().ok_or(Error::DtypeMismatch {
                    site: "conv2d bias",
                    a: Dtype::Single,
                    b: b.dtype(),
                })?),
                None => None,
            };
            Ok(Tensor::from_f32(oshape, conv2d_kernel(xv, wv, bv, xs, spec, oh, ow)))
        }
        (Storage::F64(xv), Storage::F64(wv)) => {
            let bv = match bias {
                Some(b) => Some(b.f64s().ok_or(Error::DtypeMismatch {
                    site: "conv2d bias",
                    a: Dtype::Double,
                    b: b.dtype(),
                })?),
                None => None,
            };
            Ok(Tensor::from_f64(oshape, conv2d_kernel(xv, wv, bv, xs, spec, oh, ow)))
        }
        _ => Err(Error::DtypeMismatch {
            site: "conv2d",
            a: x.dtype(),
            b: w.dtype(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

/// He initialization: weights iid `N(0, 2/fan_in)`.
pub fn he_init(spec: &ConvSpec, rng: &mut RngStream, dtype: Dtype) -> Result<Tensor> {
    fan_in_init(spec, 2.0, rng, dtype)
}

/// Fan-in Gaussian initialization with an explicit gain: `N(0, gain/fan_in)`.
/// Gain 2 preserves the second moment through a rectifier; gain 1 preserves it
/// when the incoming signal is already zero-mean unit-variance.
pub fn fan_in_init(spec: &ConvSpec, gain: f64, rng: &mut RngStream, dtype: Dtype) -> Result<Tensor> {
    spec.validate()?;
    let std = (gain / spec.fan_in() as f64).sqrt();
    gaussian(spec.weight_shape(), 0.0, std, rng, dtype)
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

/// Mean of the standard normal restricted to the positive half line.
pub const RELU_MEAN_UNIT_GAUSSIAN: f64 = 0.3989422804014327; // 1/sqrt(2*pi)

/// Reference std of `silu(x)` under `x ~ N(0,1)`; the value wired into the
/// scaled nonlinearity and the gain registry.
pub const SILU_STD_UNIT_GAUSSIAN: f64 = 0.5595;

/// Mean of `silu(x)` under `x ~ N(0,1)`, by numerical quadrature of
/// `x*sigmoid(x)*phi(x)`.
pub const SILU_MEAN_UNIT_GAUSSIAN: f64 = 0.206620964142;

/// Std of `tanh(x)` under `x ~ N(0,1)`, frozen from
/// `estimate_activation_std(Tanh, dim 256, 1<<20 vectors, seed 7)`; quadrature
/// gives 0.627929.
pub const TANH_STD_UNIT_GAUSSIAN: f64 = 0.6279291375870583;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Silu,
    Tanh,
    Identity,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Silu => x * sigmoid_scalar(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Silu => {
                let s = sigmoid_scalar(x);
                s + x * s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Identity => 1.0,
        }
    }

    /// sigma_g: std of `g(x)` for `x ~ N(0,1)`.
    pub fn sigma_g(self) -> f64 {
        match self {
            ActivationKind::Relu => (0.5 * (1.0 - 1.0 / std::f64::consts::PI)).sqrt(),
            ActivationKind::Silu => SILU_STD_UNIT_GAUSSIAN,
            ActivationKind::Tanh => TANH_STD_UNIT_GAUSSIAN,
            ActivationKind::Identity => 1.0,
        }
    }

    /// mu_g: mean of `g(x)` for `x ~ N(0,1)`.
    pub fn mu_g(self) -> f64 {
        match self {
            ActivationKind::Relu => RELU_MEAN_UNIT_GAUSSIAN,
            ActivationKind::Silu => SILU_MEAN_UNIT_GAUSSIAN,
            ActivationKind::Tanh | ActivationKind::Identity => 0.0,
        }
    }

    pub fn all() -> [ActivationKind; 4] {
        [
            ActivationKind::Relu,
            ActivationKind::Silu,
            ActivationKind::Tanh,
            ActivationKind::Identity,
        ]
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Silu => "silu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "silu" | "swish" => Ok(ActivationKind::Silu),
            "tanh" => Ok(ActivationKind::Tanh),
            "identity" | "linear" => Ok(ActivationKind::Identity),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise nonlinearity. With `scaled`, the output is `g(x)/sigma_g` so a
/// unit-variance Gaussian input keeps unit variance; the gain lives in the
/// nonlinearity rather than in the weight reparameterization.
pub fn activation(x: &Tensor, kind: ActivationKind, scaled: bool) -> Tensor {
    if scaled {
        let inv = 1.0 / kind.sigma_g();
        x.map(move |v| kind.apply(v) * inv)
    } else {
        x.map(move |v| kind.apply(v))
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

// ---------------------------------------------------------------------------
// Batch-statistics normalization
// ---------------------------------------------------------------------------

/// Normalizes each channel over N,H,W with batch statistics (population
/// variance), identity affine. A constant channel maps to zero through the
/// eps guard.
pub fn batch_norm_stats(x: &Tensor, eps: f64) -> Result<Tensor> {
    let s = x.shape();
    if s.n * s.h * s.w < 2 {
        return Err(Error::invalid("batch_norm_stats needs at least 2 values per channel"));
    }
    let means = crate::tensor::channel_means(x);
    let vars = crate::tensor::channel_variances(x);
    let inv_std: Vec<f64> = vars.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for i in 0..x.len() {
        let c = i % s.c;
        out.set(i, (x.get(i) - means[c]) * inv_std[c]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Non-overlapping k x k window means. Spatial extents must divide by `k`.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if k == 0 || s.h % k != 0 || s.w % k != 0 {
        return Err(Error::invalid(format!(
            "avg_pool2d: extents {}x{} not divisible by k={k}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / k, s.w / k);
    let oshape = Shape::new(s.n, oh, ow, s.c);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(oshape, x.dtype());
    for n in 0..s.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..s.c {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.at(n, oy * k + dy, ox * k + dx, c);
                        }
                    }
                    out.set_at(n, oy, ox, c, acc * inv);
                }
            }
        }
    }
    Ok(out)
}

/// Mean over all spatial positions, to shape (n, 1, 1, c).
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let inv = 1.0 / (s.h * s.w) as f64;
    let mut out = Tensor::zeros(Shape::new(s.n, 1, 1, s.c), x.dtype());
    for n in 0..s.n {
        let mut acc = vec![0.0f64; s.c];
        for h in 0..s.h {
            for w in 0..s.w {
                for c in 0..s.c {
                    acc[c] += x.at(n, h, w, c);
                }
            }
        }
        for c in 0..s.c {
            out.set_at(n, 0, 0, c, acc[c] * inv);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Squeeze-excite
// ---------------------------------------------------------------------------

/// Parameters of the two-layer gating MLP: 1x1 conv -> activation -> 1x1 conv.
#[derive(Clone, Debug)]
pub struct SqueezeExciteParams {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub channels: usize,
    pub hidden: usize,
}

impl SqueezeExciteParams {
    pub fn he_init(channels: usize, hidden: usize, rng: &mut RngStream, dtype: Dtype) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("squeeze-excite hidden width must be >= 1"));
        }
        let s0 = ConvSpec::new(channels, hidden, 1, 1, 0);
        let s1 = ConvSpec::new(hidden, channels, 1, 1, 0);
        Ok(SqueezeExciteParams {
            w0: he_init(&s0, rng, dtype)?,
            b0: Tensor::zeros(Shape::new(1, 1, 1, hidden), dtype),
            w1: he_init(&s1, rng, dtype)?,
            b1: Tensor::zeros(Shape::new(1, 1, 1, channels), dtype),
            channels,
            hidden,
        })
    }

    pub fn zeros(channels: usize, hidden: usize, dtype: Dtype) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("squeeze-excite hidden width must be >= 1"));
        }
        let s0 = ConvSpec::new(channels, hidden, 1, 1, 0);
        let s1 = ConvSpec::new(hidden, channels, 1, 1, 0);
        Ok(SqueezeExciteParams {
            w0: Tensor::zeros(s0.weight_shape(), dtype),
            b0: Tensor::zeros(Shape::new(1, 1, 1, hidden), dtype),
            w1: Tensor::zeros(s1.weight_shape(), dtype),
            b1: Tensor::zeros(Shape::new(1, 1, 1, channels), dtype),
            channels,
            hidden,
        })
    }
}

/// Per-channel sigmoid gate from globally pooled features:
/// `y = s * sigmoid(MLP(pool(x))) * x` with `s = 2` when `corrected`.
///
/// The sigmoid squashes into [0, 1] and at initialization sits at 1/2, which
/// halves the signal amplitude; the factor 2 restores it.
pub fn squeeze_excite(
    x: &Tensor,
    p: &SqueezeExciteParams,
    act: ActivationKind,
    corrected: bool,
) -> Result<Tensor> {
    let s = x.shape();
    if s.c != p.channels {
        return Err(Error::invalid(format!(
            "squeeze_excite: {} channels, params built for {}",
            s.c, p.channels
        )));
    }
    let pooled = global_avg_pool(x);
    let s0 = ConvSpec::new(p.channels, p.hidden, 1, 1, 0);
    let s1 = ConvSpec::new(p.hidden, p.channels, 1, 1, 0);
    let h = conv2d(&pooled, &p.w0, Some(&p.b0), &s0)?;
    let h = activation(&h, act, true);
    let h = conv2d(&h, &p.w1, Some(&p.b1), &s1)?;
    let scale = if corrected { 2.0 } else { 1.0 };
    let gate = h.map(move |v| sigmoid_scalar(v) * scale);
    mul_channel_gate(x, &gate)
}

/// Elementwise product of `x` (n,h,w,c) with a per-(sample, channel) gate of
/// shape (n,1,1,c).
pub fn mul_channel_gate(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let gs = gate.shape();
    if gs.n != s.n || gs.h != 1 || gs.w != 1 || gs.c != s.c {
        return Err(Error::ShapeMismatch {
            site: "mul_channel_gate",
            expected: Shape::new(s.n, 1, 1, s.c),
            got: gs,
        });
    }
    let mut out = x.clone();
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                for c in 0..s.c {
                    out.set_at(n, h, w, c, x.at(n, h, w, c) * gate.at(n, 0, 0, c));
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear head
// ---------------------------------------------------------------------------

/// Affine map on pooled features. `x` must be (n,1,1,c); `w` is
/// (out,1,1,in); `b` is (1,1,1,out). Output is (n,1,1,out).
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.h != 1 || xs.w != 1 {
        return Err(Error::invalid("linear expects pooled (n,1,1,c) input"));
    }
    if ws.h != 1 || ws.w != 1 || ws.c != xs.c {
        return Err(Error::ShapeMismatch {
            site: "linear weight",
            expected: Shape::new(ws.n, 1, 1, xs.c),
            got: ws,
        });
    }
    if b.len() != ws.n {
        return Err(Error::invalid(format!("bias length {} != out {}", b.len(), ws.n)));
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, 1, 1, ws.n), x.dtype());
    for n in 0..xs.n {
        for o in 0..ws.n {
            let mut acc = b.get(o);
            for c in 0..xs.c {
                acc += x.at(n, 0, 0, c) * w.at(o, 0, 0, c);
            }
            out.set_at(n, 0, 0, o, acc);
        }
    }
    Ok(out)
}
