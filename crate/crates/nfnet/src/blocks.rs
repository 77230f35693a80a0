//! Residual blocks: the normalizer-free block with its analytic variance
//! ledger, and BatchNorm reference blocks in both pre-activation orderings.
//!
//! NF blocks have the form `x_{l+1} = x_l + alpha * f(x_l / beta_l)` where
//! `beta_l = sqrt(Var(x_l))` is tracked analytically, never estimated from the
//! batch, so the network stays batch-independent. The branch `f` is built to
//! be variance preserving at initialization, so the signal variance grows by
//! `alpha^2` per block and resets to 1 at transitions, whose shortcut
//! convolution consumes the downscaled input.

use crate::error::{Error, Result};
use crate::ops::{
    activation, avg_pool2d, batch_norm_stats, conv2d, squeeze_excite, ActivationKind, ConvSpec,
    SqueezeExciteParams,
};
use crate::tensor::{ensure_finite, RngStream, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Analytic bookkeeping of the expected signal variance.
///
/// `beta_l = sqrt(expected_var)` at block entry; `expected_var` gains
/// `alpha^2` after every block and is reset to 1 at a transition before the
/// increment (so the post-transition value is `1 + alpha^2`). SkipInit gains
/// and stochastic depth are ignored by the ledger.
#[derive(Clone, Debug)]
pub struct VarianceLedger {
    pub alpha: f64,
    pub expected_var: f64,
    pub history: Vec<LedgerEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerEntry {
    pub block_index: usize,
    /// Downscale applied to the branch input of this block.
    pub beta: f64,
    /// Predicted Var(x) at the block's output.
    pub expected_var: f64,
}

impl VarianceLedger {
    pub fn new(alpha: f64) -> VarianceLedger {
        VarianceLedger { alpha, expected_var: 1.0, history: Vec::new() }
    }

    /// Returns beta for the current block and advances the prediction.
    pub fn advance(&mut self, is_transition: bool) -> f64 {
        let beta = self.expected_var.sqrt();
        if is_transition {
            self.expected_var = 1.0;
        }
        self.expected_var += self.alpha * self.alpha;
        self.history.push(LedgerEntry {
            block_index: self.history.len(),
            beta,
            expected_var: self.expected_var,
        });
        beta
    }
}

/// The two per-block activation snapshots used for signal propagation plots.
#[derive(Clone, Debug)]
pub struct BlockTap {
    /// Branch output before the skip merge (and before the SkipInit/alpha
    /// scaling), so its variance reflects the branch parameterization.
    pub residual_out: Tensor,
    pub block_out: Tensor,
}

/// How a transition block downsamples its skip path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutStyle {
    /// Average-pool by the stride, then a stride-1 1x1 convolution. Pooling
    /// attenuates the signal std by the pool size; the resulting beta
    /// misestimation is accepted, not corrected.
    AvgPoolConv,
    /// Strided 1x1 convolution on the downscaled input; variance preserving,
    /// so the ledger's transition reset stays exact.
    StridedConv,
}

/// Parameters of one normalizer-free bottleneck block.
#[derive(Clone, Debug)]
pub struct NfBlockParams {
    pub conv1x1a: crate::ws::StandardizedConv,
    /// Grouped spatial conv; carries the block's stride.
    pub conv3x3: crate::ws::StandardizedConv,
    pub conv1x1b: crate::ws::StandardizedConv,
    /// Present iff the block is a transition (stride > 1 or in_ch != out_ch).
    pub shortcut: Option<(crate::ws::StandardizedConv, ShortcutStyle)>,
    pub se: Option<SqueezeExciteParams>,
    /// Learnable scalar on the branch, shape (1,1,1,1), initialized to zero so
    /// the block starts as the identity.
    pub skipinit_gain: Tensor,
    pub stochdepth_rate: f64,
    pub stride: usize,
}

impl NfBlockParams {
    pub fn is_transition(&self) -> bool {
        self.shortcut.is_some()
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.conv1x1a.param_count()
            + self.conv3x3.param_count()
            + self.conv1x1b.param_count()
            + self.skipinit_gain.len();
        if let Some((sc, _)) = &self.shortcut {
            n += sc.param_count();
        }
        if let Some(se) = &self.se {
            n += se.w0.len() + se.b0.len() + se.w1.len() + se.b1.len();
        }
        n
    }
}

fn finite(t: &Tensor, block: Option<usize>, site: &str) -> Result<()> {
    match block {
        Some(b) => ensure_finite(t, site).map_err(|_| Error::Collapse {
            block_index: b,
            site: site.to_string(),
        }),
        None => ensure_finite(t, site),
    }
}

/// Forward pass of an NF block.
///
/// `out = scaled_act(x)/beta`; transitions take the shortcut from `out`
/// (pool+1x1 or strided 1x1), other blocks pass `x` through unchanged. The
/// branch is 1x1 -> act -> grouped 3x3 (stride) -> squeeze-excite (x2
/// corrected) -> act -> 1x1, and merges as
/// `block_out = residual * skipinit_gain * alpha * gate + shortcut`.
pub fn nf_block_forward(
    x: &Tensor,
    params: &NfBlockParams,
    beta: f64,
    alpha: f64,
    act: ActivationKind,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<BlockTap> {
    if beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let out = activation(x, act, true).scale(1.0 / beta);
    finite(&out, None, "branch input")?;

    let shortcut = match &params.shortcut {
        Some((conv, ShortcutStyle::AvgPoolConv)) => {
            let pooled = if params.stride > 1 {
                avg_pool2d(&out, params.stride)?
            } else {
                out.clone()
            };
            conv.forward(&pooled)?
        }
        Some((conv, ShortcutStyle::StridedConv)) => conv.forward(&out)?,
        None => x.clone(),
    };

    let h = params.conv1x1a.forward(&out)?;
    finite(&h, None, "conv1x1a")?;
    let h = activation(&h, act, true);
    let h = params.conv3x3.forward(&h)?;
    finite(&h, None, "conv3x3")?;
    let h = match &params.se {
        Some(se) => squeeze_excite(&h, se, act, true)?,
        None => h,
    };
    let h = activation(&h, act, true);
    let h = params.conv1x1b.forward(&h)?;
    finite(&h, None, "conv1x1b")?;

    let gate = stochastic_depth_gate(params.stochdepth_rate, mode, rng)?;
    let gain = params.skipinit_gain.get(0);
    let block_out = shortcut.add_scaled(&h, gain * alpha * gate)?;
    finite(&block_out, None, "block output")?;

    Ok(BlockTap { residual_out: h, block_out })
}

/// Unrescaled stochastic depth: in train mode the branch is dropped with
/// probability `rate`, and the kept branch is *not* divided by the keep
/// probability (that rescaling would break the variance bookkeeping).
pub fn stochastic_depth_gate(rate: f64, mode: Mode, rng: &mut RngStream) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("stochdepth rate {rate} outside [0,1)")));
    }
    Ok(match mode {
        Mode::Eval => 1.0,
        Mode::Train => {
            if rate > 0.0 && rng.next_bernoulli(rate) {
                0.0
            } else {
                1.0
            }
        }
    })
}

// ---------------------------------------------------------------------------
// BatchNorm reference blocks
// ---------------------------------------------------------------------------

/// Order of normalizer and nonlinearity inside each pre-activation unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnOrdering {
    /// BN -> ReLU -> Conv: convs see a rectified normalized input, so the
    /// branch picks up a mean shift and lands at channel variance
    /// 2*Var(relu) = 1 - 1/pi at He init.
    BnReluConv,
    /// ReLU -> BN -> Conv: convs see a zero-mean unit-variance input; no mean
    /// shift, branch variance near 1 with unit-gain fan-in init.
    ReluBnConv,
}

impl BnOrdering {
    /// Fan-in init gain that keeps each conv variance preserving for the
    /// input distribution this ordering feeds it: gain 2 compensates
    /// rectification, gain 1 matches an already-normalized input.
    pub fn init_gain(self) -> f64 {
        match self {
            BnOrdering::BnReluConv => 2.0,
            BnOrdering::ReluBnConv => 1.0,
        }
    }

    /// Expected residual-branch channel variance at initialization.
    pub fn branch_variance(self) -> f64 {
        match self {
            BnOrdering::BnReluConv => 1.0 - 1.0 / std::f64::consts::PI,
            BnOrdering::ReluBnConv => 1.0,
        }
    }
}

impl std::fmt::Display for BnOrdering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BnOrdering::BnReluConv => write!(f, "bn-relu-conv"),
            BnOrdering::ReluBnConv => write!(f, "relu-bn-conv"),
        }
    }
}

impl std::str::FromStr for BnOrdering {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bn-relu-conv" | "bn_relu_conv" => Ok(BnOrdering::BnReluConv),
            "relu-bn-conv" | "relu_bn_conv" => Ok(BnOrdering::ReluBnConv),
            other => Err(Error::invalid(format!("unknown ordering `{other}`"))),
        }
    }
}

/// One plain conv of the BatchNorm reference branch (no bias; BN absorbs it).
#[derive(Clone, Debug)]
pub struct BnConv {
    pub weight: Tensor,
    pub spec: ConvSpec,
}

impl BnConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, None, &self.spec)
    }
}

/// Parameters of one pre-activation bottleneck reference block.
#[derive(Clone, Debug)]
pub struct BnBlockParams {
    pub conv1x1a: BnConv,
    pub conv3x3: BnConv,
    pub conv1x1b: BnConv,
    pub shortcut: Option<BnConv>,
    pub eps: f64,
    pub stride: usize,
}

impl BnBlockParams {
    pub fn is_transition(&self) -> bool {
        self.shortcut.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.conv1x1a.weight.len()
            + self.conv3x3.weight.len()
            + self.conv1x1b.weight.len()
            + self.shortcut.as_ref().map_or(0, |s| s.weight.len())
    }
}

/// Pre-activation bottleneck with batch-statistics normalization.
///
/// The shared pre-activation of the block input feeds both the branch and,
/// in transition blocks, the shortcut convolution, which is what resets the
/// accumulated skip-path variance at stage boundaries.
pub fn bn_block_forward(
    x: &Tensor,
    params: &BnBlockParams,
    ordering: BnOrdering,
) -> Result<BlockTap> {
    let pre = |t: &Tensor| -> Result<Tensor> {
        Ok(match ordering {
            BnOrdering::BnReluConv => activation(&batch_norm_stats(t, params.eps)?, ActivationKind::Relu, false),
            BnOrdering::ReluBnConv => batch_norm_stats(&activation(t, ActivationKind::Relu, false), params.eps)?,
        })
    };

    let p = pre(x)?;
    finite(&p, None, "preactivation")?;
    let shortcut = match &params.shortcut {
        Some(sc) => sc.forward(&p)?,
        None => x.clone(),
    };
    let h = params.conv1x1a.forward(&p)?;
    finite(&h, None, "conv1x1a")?;
    let h = params.conv3x3.forward(&pre(&h)?)?;
    finite(&h, None, "conv3x3")?;
    let h = params.conv1x1b.forward(&pre(&h)?)?;
    finite(&h, None, "conv1x1b")?;
    let block_out = shortcut.add(&h)?;

    Ok(BlockTap { residual_out: h, block_out })
}

/// Attach a block index to collapse errors bubbling out of a block forward.
pub(crate) fn tag_block_errors(err: Error, block_index: usize) -> Error {
    match err {
        Error::NonFinite { site } => Error::Collapse { block_index, site },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{avg_channel_variance, gaussian, Dtype, Shape};
    use crate::ws::StandardizedConv;

    fn nf_block(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        style: ShortcutStyle,
        rng: &mut RngStream,
    ) -> NfBlockParams {
        let mid = out_ch;
        let transition = stride > 1 || in_ch != out_ch;
        let shortcut = if transition {
            let spec = match style {
                ShortcutStyle::AvgPoolConv => ConvSpec::new(in_ch, out_ch, 1, 1, 0),
                ShortcutStyle::StridedConv => ConvSpec::new(in_ch, out_ch, 1, stride, 0),
            };
            Some((StandardizedConv::scaled_ws(spec, rng, Dtype::Double).unwrap(), style))
        } else {
            None
        };
        NfBlockParams {
            conv1x1a: StandardizedConv::scaled_ws(ConvSpec::new(in_ch, mid, 1, 1, 0), rng, Dtype::Double).unwrap(),
            conv3x3: StandardizedConv::scaled_ws(ConvSpec::new(mid, mid, 3, stride, 1), rng, Dtype::Double).unwrap(),
            conv1x1b: StandardizedConv::scaled_ws(ConvSpec::new(mid, out_ch, 1, 1, 0), rng, Dtype::Double).unwrap(),
            shortcut,
            se: None,
            skipinit_gain: Tensor::zeros(Shape::new(1, 1, 1, 1), Dtype::Double),
            stochdepth_rate: 0.0,
            stride,
        }
    }

    fn set_skipinit(p: &mut NfBlockParams, v: f64) {
        p.skipinit_gain = Tensor::filled(Shape::new(1, 1, 1, 1), v, Dtype::Double);
    }

    #[test]
    fn ledger_recurrence() {
        let mut ledger = VarianceLedger::new(0.2);
        let beta = ledger.advance(true);
        assert_eq!(beta, 1.0);
        assert!((ledger.expected_var - 1.04).abs() < 1e-12);

        let b1 = ledger.advance(false);
        assert!((b1 - 1.04f64.sqrt()).abs() < 1e-12);
        assert!((ledger.expected_var - 1.08).abs() < 1e-12);
        let b2 = ledger.advance(false);
        assert!((b2 - 1.08f64.sqrt()).abs() < 1e-12);
        assert!((ledger.expected_var - 1.12).abs() < 1e-12);
    }

    #[test]
    fn ledger_linear_growth_at_unit_alpha() {
        let mut ledger = VarianceLedger::new(1.0);
        ledger.advance(true);
        for _ in 0..7 {
            ledger.advance(false);
        }
        // After a transition plus l-1 plain blocks, Var = 1 + l.
        assert_eq!(ledger.expected_var, 9.0);
        assert_eq!(ledger.history.len(), 8);
    }

    #[test]
    fn zero_skipinit_block_is_identity() {
        let mut rng = RngStream::new(10);
        let params = nf_block(16, 16, 1, ShortcutStyle::StridedConv, &mut rng);
        let x = gaussian(Shape::new(2, 8, 8, 16), 0.0, 1.2, &mut rng, Dtype::Double).unwrap();
        let tap = nf_block_forward(&x, &params, 1.3, 0.2, ActivationKind::Relu, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tap.block_out, x);
    }

    #[test]
    fn branch_is_variance_preserving() {
        let mut rng = RngStream::new(11);
        let mut params = nf_block(256, 256, 1, ShortcutStyle::StridedConv, &mut rng);
        set_skipinit(&mut params, 1.0);
        let beta: f64 = 1.5;
        let x = gaussian(Shape::new(8, 8, 8, 256), 0.0, beta, &mut rng, Dtype::Double).unwrap();
        let tap = nf_block_forward(&x, &params, beta, 0.2, ActivationKind::Relu, Mode::Eval, &mut rng).unwrap();
        let v = avg_channel_variance(&tap.residual_out);
        assert!((v - 1.0).abs() < 0.1, "branch variance {v}");
    }

    #[test]
    fn block_variance_gains_alpha_squared() {
        let mut rng = RngStream::new(12);
        let mut params = nf_block(256, 256, 1, ShortcutStyle::StridedConv, &mut rng);
        set_skipinit(&mut params, 1.0);
        let alpha = 1.0;
        let x = gaussian(Shape::new(8, 8, 8, 256), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let tap = nf_block_forward(&x, &params, 1.0, alpha, ActivationKind::Relu, Mode::Eval, &mut rng).unwrap();
        let vin = avg_channel_variance(&x);
        let vout = avg_channel_variance(&tap.block_out);
        let expected = vin + alpha * alpha;
        assert!(
            (vout - expected).abs() / expected < 0.1,
            "var {vout} vs {expected}"
        );
    }

    #[test]
    fn transition_resets_to_one_plus_alpha_squared() {
        let mut rng = RngStream::new(13);
        let mut params = nf_block(192, 256, 2, ShortcutStyle::StridedConv, &mut rng);
        set_skipinit(&mut params, 1.0);
        let alpha = 1.0;
        let beta: f64 = 3.0; // pretend deep in a stage: Var(x) = 9
        let x = gaussian(Shape::new(8, 16, 16, 192), 0.0, beta, &mut rng, Dtype::Double).unwrap();
        let tap = nf_block_forward(&x, &params, beta, alpha, ActivationKind::Relu, Mode::Eval, &mut rng).unwrap();
        let v = avg_channel_variance(&tap.block_out);
        let expected = 1.0 + alpha * alpha;
        assert!((v - expected).abs() / expected < 0.1, "post-transition var {v}");
    }

    #[test]
    fn deep_identity_stack_is_exact() {
        let mut rng = RngStream::new(14);
        let blocks: Vec<NfBlockParams> = (0..24)
            .map(|_| nf_block(32, 32, 1, ShortcutStyle::StridedConv, &mut rng))
            .collect();
        let x = gaussian(Shape::new(2, 6, 6, 32), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let mut h = x.clone();
        let mut ledger = VarianceLedger::new(0.2);
        for b in &blocks {
            let beta = ledger.advance(b.is_transition());
            h = nf_block_forward(&h, b, beta, 0.2, ActivationKind::Relu, Mode::Eval, &mut rng)
                .unwrap()
                .block_out;
        }
        assert_eq!(h, x);
    }

    #[test]
    fn gate_contract() {
        let mut rng = RngStream::new(15);
        for _ in 0..50 {
            assert_eq!(stochastic_depth_gate(0.0, Mode::Train, &mut rng).unwrap(), 1.0);
            assert_eq!(stochastic_depth_gate(0.7, Mode::Eval, &mut rng).unwrap(), 1.0);
        }
        assert!(stochastic_depth_gate(1.0, Mode::Train, &mut rng).is_err());

        let mut drops = 0usize;
        let n = 100_000;
        for _ in 0..n {
            if stochastic_depth_gate(0.1, Mode::Train, &mut rng).unwrap() == 0.0 {
                drops += 1;
            }
        }
        let freq = drops as f64 / n as f64;
        assert!((freq - 0.1).abs() < 0.005, "drop frequency {freq}");
    }

    fn bn_block(
        in_ch: usize,
        mid: usize,
        out_ch: usize,
        stride: usize,
        gain: f64,
        rng: &mut RngStream,
    ) -> BnBlockParams {
        let mk = |spec: ConvSpec, rng: &mut RngStream| BnConv {
            weight: crate::ops::fan_in_init(&spec, gain, rng, Dtype::Double).unwrap(),
            spec,
        };
        let transition = stride > 1 || in_ch != out_ch;
        BnBlockParams {
            conv1x1a: mk(ConvSpec::new(in_ch, mid, 1, 1, 0), rng),
            conv3x3: mk(ConvSpec::new(mid, mid, 3, stride, 1), rng),
            conv1x1b: mk(ConvSpec::new(mid, out_ch, 1, 1, 0), rng),
            shortcut: transition.then(|| mk(ConvSpec::new(in_ch, out_ch, 1, stride, 0), rng)),
            eps: 1e-5,
            stride,
        }
    }

    #[test]
    fn bn_branch_variance_constants() {
        // Bottleneck mid-width 512: branch-end channel variance lands at
        // 1 - 1/pi for BN-ReLU-Conv and at 1 for ReLU-BN-Conv.
        let mut rng = RngStream::new(16);
        let x = gaussian(Shape::new(8, 8, 8, 512), 0.0, 1.7, &mut rng, Dtype::Double).unwrap();

        let p = bn_block(512, 512, 512, 1, BnOrdering::BnReluConv.init_gain(), &mut rng);
        let tap = bn_block_forward(&x, &p, BnOrdering::BnReluConv).unwrap();
        let v = avg_channel_variance(&tap.residual_out);
        assert!((v - 0.6817).abs() < 0.05, "bn-relu-conv branch var {v}");

        let p = bn_block(512, 512, 512, 1, BnOrdering::ReluBnConv.init_gain(), &mut rng);
        let tap = bn_block_forward(&x, &p, BnOrdering::ReluBnConv).unwrap();
        let v = avg_channel_variance(&tap.residual_out);
        assert!((v - 1.0).abs() < 0.05, "relu-bn-conv branch var {v}");
    }

    #[test]
    fn bn_block_variance_recurrence() {
        // Var(block_out) ~ Var(x) + Var(residual) for either ordering.
        let mut rng = RngStream::new(17);
        for ordering in [BnOrdering::BnReluConv, BnOrdering::ReluBnConv] {
            let x = gaussian(Shape::new(8, 8, 8, 256), 0.0, 1.4, &mut rng, Dtype::Double).unwrap();
            let p = bn_block(256, 256, 256, 1, ordering.init_gain(), &mut rng);
            let tap = bn_block_forward(&x, &p, ordering).unwrap();
            let lhs = avg_channel_variance(&tap.block_out);
            let rhs = avg_channel_variance(&x) + avg_channel_variance(&tap.residual_out);
            assert!((lhs - rhs).abs() / rhs < 0.1, "{ordering}: {lhs} vs {rhs}");
        }
    }
}
