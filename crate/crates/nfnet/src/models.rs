//! Config-driven model builders: normalizer-free ResNets and RegNets, and the
//! BatchNorm reference ResNet in both pre-activation orderings.
//!
//! Construction threads the variance ledger through the block sequence so
//! every block records its beta and post-block variance prediction. Rebuilding
//! with the same seed reproduces bit-identical parameters.

use crate::blocks::{
    bn_block_forward, nf_block_forward, BlockTap, BnBlockParams, BnConv, BnOrdering, LedgerEntry,
    Mode, NfBlockParams, ShortcutStyle, VarianceLedger,
};
use crate::error::{Error, Result};
use crate::ops::{
    activation, batch_norm_stats, global_avg_pool, linear, ActivationKind, ConvSpec,
    SqueezeExciteParams,
};
use crate::tensor::{Dtype, RngStream, Shape, Tensor};
use crate::ws::StandardizedConv;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

/// NF-RegNet compound-scaled variants with their base stage widths/depths and
/// per-variant training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegNetVariant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl RegNetVariant {
    pub fn base_widths(self) -> [usize; 4] {
        match self {
            RegNetVariant::B0 | RegNetVariant::B1 => [48, 104, 208, 440],
            RegNetVariant::B2 => [56, 112, 232, 488],
            RegNetVariant::B3 => [56, 128, 248, 528],
            RegNetVariant::B4 => [64, 144, 288, 616],
            RegNetVariant::B5 => [80, 168, 336, 704],
        }
    }

    pub fn depths(self) -> [usize; 4] {
        match self {
            RegNetVariant::B0 => [1, 3, 6, 6],
            RegNetVariant::B1 => [2, 4, 7, 7],
            RegNetVariant::B2 => [2, 4, 8, 8],
            RegNetVariant::B3 => [2, 5, 9, 9],
            RegNetVariant::B4 => [2, 6, 11, 11],
            RegNetVariant::B5 => [3, 7, 14, 14],
        }
    }

    /// (train, test) image sizes.
    pub fn image_sizes(self) -> (usize, usize) {
        match self {
            RegNetVariant::B0 => (192, 224),
            RegNetVariant::B1 => (240, 256),
            RegNetVariant::B2 => (240, 272),
            RegNetVariant::B3 => (288, 320),
            RegNetVariant::B4 => (320, 384),
            RegNetVariant::B5 => (384, 456),
        }
    }

    pub fn dropout_rate(self) -> f64 {
        match self {
            RegNetVariant::B0 | RegNetVariant::B1 => 0.2,
            RegNetVariant::B2 | RegNetVariant::B3 => 0.3,
            RegNetVariant::B4 | RegNetVariant::B5 => 0.4,
        }
    }

    pub fn weight_decay(self) -> f64 {
        match self {
            RegNetVariant::B0 | RegNetVariant::B1 => 2e-5,
            RegNetVariant::B2 => 3e-5,
            RegNetVariant::B3 | RegNetVariant::B4 => 4e-5,
            RegNetVariant::B5 => 5e-5,
        }
    }
}

impl std::str::FromStr for RegNetVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B0" | "b0" => Ok(RegNetVariant::B0),
            "B1" | "b1" => Ok(RegNetVariant::B1),
            "B2" | "b2" => Ok(RegNetVariant::B2),
            "B3" | "b3" => Ok(RegNetVariant::B3),
            "B4" | "b4" => Ok(RegNetVariant::B4),
            "B5" | "b5" => Ok(RegNetVariant::B5),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

impl std::fmt::Display for RegNetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug)]
pub struct NfRegNetConfig {
    pub variant: RegNetVariant,
    /// Architecture-level width multiplier applied to the base widths.
    pub width_multiplier: f64,
    /// Desk-scale shrink factor applied after the width multiplier; the group
    /// size shrinks proportionally with a floor of 1.
    pub width_scale: f64,
    /// Inverted-bottleneck expansion on the block's input width; the very
    /// first block of the network uses expansion 1.
    pub expansion: f64,
    pub group_size: usize,
    pub se_ratio: f64,
    pub alpha: f64,
    /// Maximum stochastic-depth drop rate; per-block rates scale linearly
    /// from 0 to this value across the block index.
    pub stochdepth_rate: f64,
    pub activation: ActivationKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dtype: Dtype,
}

impl NfRegNetConfig {
    pub fn new(variant: RegNetVariant) -> NfRegNetConfig {
        NfRegNetConfig {
            variant,
            width_multiplier: 0.75,
            width_scale: 1.0,
            expansion: 2.25,
            group_size: 8,
            se_ratio: 0.5,
            alpha: 0.2,
            stochdepth_rate: 0.1,
            activation: ActivationKind::Silu,
            in_channels: 3,
            num_classes: 1000,
            dtype: Dtype::Single,
        }
    }

    /// Stage widths after the multiplier and the desk-scale factor.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.variant
            .base_widths()
            .iter()
            .map(|&b| {
                let w = (b as f64 * self.width_multiplier).floor();
                ((w * self.width_scale).floor() as usize).max(1)
            })
            .collect()
    }

    pub fn stage_depths(&self) -> Vec<usize> {
        self.variant.depths().to_vec()
    }

    pub fn scaled_group_size(&self) -> usize {
        ((self.group_size as f64 * self.width_scale).floor() as usize).max(1)
    }
}

/// ResNet family configuration (both NF and BatchNorm reference builds).
#[derive(Clone, Debug)]
pub struct ResNetConfig {
    /// Block output channels per stage (before `width_scale`).
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Mid (3x3) width = max(1, round(width * bottleneck_ratio)).
    pub bottleneck_ratio: f64,
    pub alpha: f64,
    pub activation: ActivationKind,
    /// false = plain He init everywhere (the mean-shift failure case).
    pub use_scaled_ws: bool,
    pub width_scale: f64,
    /// Stride-2 downsampling at the start of stages after the first. With
    /// `false`, resolution is constant and transitions happen only through
    /// channel changes.
    pub strided_transitions: bool,
    pub skipinit_gain_init: f64,
    pub stochdepth_rate: f64,
    /// Squeeze-excite ratio on the mid width; 0 disables.
    pub se_ratio: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dtype: Dtype,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            stage_widths: vec![64, 128, 256, 512],
            stage_depths: vec![3, 4, 6, 3],
            bottleneck_ratio: 1.0,
            alpha: 0.2,
            activation: ActivationKind::Relu,
            use_scaled_ws: true,
            width_scale: 1.0,
            strided_transitions: true,
            skipinit_gain_init: 0.0,
            stochdepth_rate: 0.0,
            se_ratio: 0.0,
            in_channels: 3,
            num_classes: 10,
            dtype: Dtype::Single,
        }
    }
}

impl ResNetConfig {
    pub fn scaled_widths(&self) -> Vec<usize> {
        self.stage_widths
            .iter()
            .map(|&w| ((w as f64 * self.width_scale).floor() as usize).max(1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != self.stage_depths.len() || self.stage_widths.is_empty() {
            return Err(Error::invalid("stage_widths and stage_depths must be equal non-empty"));
        }
        if self.width_scale <= 0.0 {
            return Err(Error::invalid("width_scale must be positive"));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }
}

// ---------------------------------------------------------------------------
// Serializable model config (the JSON external format)
// ---------------------------------------------------------------------------

/// On-disk model description:
/// `{variant|custom, stage_widths, stage_depths, alpha, width_scale,
///   activation, use_scaled_ws, ordering?, seed}`.
///
/// `variant` of `B0`..`B5` selects an NF-RegNet (widths/depths shown are the
/// resolved values); `custom` plus `ordering` selects a BatchNorm reference
/// ResNet; `custom` without `ordering` an NF-ResNet.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub variant: String,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub alpha: f64,
    pub width_scale: f64,
    pub activation: String,
    pub use_scaled_ws: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ordering: Option<String>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ModelConfig> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn build(&self) -> Result<Model> {
        if self.variant != "custom" {
            let variant: RegNetVariant = self.variant.parse()?;
            let mut cfg = NfRegNetConfig::new(variant);
            cfg.alpha = self.alpha;
            cfg.width_scale = self.width_scale;
            cfg.activation = self.activation.parse()?;
            return build_nf_regnet(&cfg, self.seed);
        }
        let cfg = ResNetConfig {
            stage_widths: self.stage_widths.clone(),
            stage_depths: self.stage_depths.clone(),
            alpha: self.alpha,
            width_scale: self.width_scale,
            activation: self.activation.parse()?,
            use_scaled_ws: self.use_scaled_ws,
            ..ResNetConfig::default()
        };
        match &self.ordering {
            Some(o) => build_bn_resnet(&cfg, o.parse()?, self.seed),
            None => build_nf_resnet(&cfg, self.seed),
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    NfResNet,
    BnResNet(BnOrdering),
    NfRegNet,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockMeta {
    pub stage: usize,
    pub index_in_stage: usize,
    pub is_transition: bool,
    pub beta: f64,
    /// Predicted Var(x) at this block's output (the ledger value for NF
    /// models, the BatchNorm growth recurrence for reference models).
    pub expected_var_after: f64,
}

#[derive(Clone, Debug)]
pub enum BlockParams {
    Nf(NfBlockParams),
    Bn(BnBlockParams),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub stem: StandardizedConv,
    pub blocks: Vec<(BlockMeta, BlockParams)>,
    pub ledger: VarianceLedger,
    /// NF-RegNet final expansion convolution.
    pub final_conv: Option<StandardizedConv>,
    /// Zero-initialized classifier (weight and bias), so logits are exactly
    /// zero at initialization.
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    pub activation: ActivationKind,
    pub alpha: f64,
    pub dropout_rate: f64,
    pub bn_eps: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dtype: Dtype,
    pub seed: u64,
}

impl Model {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.stem.param_count();
        for (_, b) in &self.blocks {
            n += match b {
                BlockParams::Nf(p) => p.param_count(),
                BlockParams::Bn(p) => p.param_count(),
            };
        }
        if let Some(fc) = &self.final_conv {
            n += fc.param_count();
        }
        n + self.classifier_w.len() + self.classifier_b.len()
    }

    /// Multiply-accumulate count of one forward pass at the given input
    /// resolution (convolutions and the classifier; elementwise ops ignored).
    pub fn flop_count(&self, res: usize) -> Result<usize> {
        let mut total = 0usize;
        let conv_cost = |spec: &ConvSpec, h: usize, w: usize| -> Result<(usize, usize, usize)> {
            let (oh, ow) = spec.out_spatial(h, w)?;
            Ok((oh * ow * spec.out_ch * spec.fan_in(), oh, ow))
        };
        let (mut h, mut w) = (res, res);
        let (c, oh, ow) = conv_cost(&self.stem.spec, h, w)?;
        total += c;
        h = oh;
        w = ow;
        for (_, b) in &self.blocks {
            match b {
                BlockParams::Nf(p) => {
                    let (c, ..) = conv_cost(&p.conv1x1a.spec, h, w)?;
                    total += c;
                    let (c, nh, nw) = conv_cost(&p.conv3x3.spec, h, w)?;
                    total += c;
                    let (c, ..) = conv_cost(&p.conv1x1b.spec, nh, nw)?;
                    total += c;
                    if let Some((sc, style)) = &p.shortcut {
                        let (sh, sw) = match style {
                            ShortcutStyle::AvgPoolConv if p.stride > 1 => (h / p.stride, w / p.stride),
                            _ => (h, w),
                        };
                        let (c, ..) = conv_cost(&sc.spec, sh, sw)?;
                        total += c;
                    }
                    if let Some(se) = &p.se {
                        total += se.channels * se.hidden * 2;
                    }
                    h = nh;
                    w = nw;
                }
                BlockParams::Bn(p) => {
                    let (c, ..) = conv_cost(&p.conv1x1a.spec, h, w)?;
                    total += c;
                    let (c, nh, nw) = conv_cost(&p.conv3x3.spec, h, w)?;
                    total += c;
                    let (c, ..) = conv_cost(&p.conv1x1b.spec, nh, nw)?;
                    total += c;
                    if let Some(sc) = &p.shortcut {
                        let (c, ..) = conv_cost(&sc.spec, h, w)?;
                        total += c;
                    }
                    h = nh;
                    w = nw;
                }
            }
        }
        if let Some(fc) = &self.final_conv {
            let (c, ..) = conv_cost(&fc.spec, h, w)?;
            total += c;
        }
        total += self.classifier_w.len();
        Ok(total)
    }

    /// Every convolution in an NF model must either standardize its weight or
    /// be a registered exemption (squeeze-excite MLP, zero-init classifier).
    pub fn validate_ws_coverage(&self) -> Result<()> {
        if matches!(self.kind, ModelKind::BnResNet(_)) {
            return Ok(());
        }
        let expect_ws = |conv: &StandardizedConv, site: &str| -> Result<()> {
            if conv.standardize {
                Ok(())
            } else {
                Err(Error::invalid(format!("plain convolution at {site} in an NF model")))
            }
        };
        expect_ws(&self.stem, "stem")?;
        for (i, (_, b)) in self.blocks.iter().enumerate() {
            if let BlockParams::Nf(p) = b {
                expect_ws(&p.conv1x1a, &format!("block {i} conv1x1a"))?;
                expect_ws(&p.conv3x3, &format!("block {i} conv3x3"))?;
                expect_ws(&p.conv1x1b, &format!("block {i} conv1x1b"))?;
                if let Some((sc, _)) = &p.shortcut {
                    expect_ws(sc, &format!("block {i} shortcut"))?;
                }
                // Exempt: squeeze-excite MLP convolutions (plain by design).
            }
        }
        if let Some(fc) = &self.final_conv {
            expect_ws(fc, "final conv")?;
        }
        // Exempt: classifier (zero-initialized).
        Ok(())
    }

    /// Visit every learnable parameter in a stable order.
    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        let conv = |name: String, c: &StandardizedConv, f: &mut dyn FnMut(String, &Tensor)| {
            f(format!("{name}.weight"), &c.weight);
            if c.standardize {
                f(format!("{name}.gain"), &c.gain);
            }
            if let Some(b) = &c.bias {
                f(format!("{name}.bias"), b);
            }
        };
        conv("stem".into(), &self.stem, f);
        for (i, (_, b)) in self.blocks.iter().enumerate() {
            match b {
                BlockParams::Nf(p) => {
                    conv(format!("block{i}.conv1x1a"), &p.conv1x1a, f);
                    conv(format!("block{i}.conv3x3"), &p.conv3x3, f);
                    conv(format!("block{i}.conv1x1b"), &p.conv1x1b, f);
                    if let Some((sc, _)) = &p.shortcut {
                        conv(format!("block{i}.shortcut"), sc, f);
                    }
                    if let Some(se) = &p.se {
                        f(format!("block{i}.se.w0"), &se.w0);
                        f(format!("block{i}.se.b0"), &se.b0);
                        f(format!("block{i}.se.w1"), &se.w1);
                        f(format!("block{i}.se.b1"), &se.b1);
                    }
                    f(format!("block{i}.skipinit_gain"), &p.skipinit_gain);
                }
                BlockParams::Bn(p) => {
                    f(format!("block{i}.conv1x1a.weight"), &p.conv1x1a.weight);
                    f(format!("block{i}.conv3x3.weight"), &p.conv3x3.weight);
                    f(format!("block{i}.conv1x1b.weight"), &p.conv1x1b.weight);
                    if let Some(sc) = &p.shortcut {
                        f(format!("block{i}.shortcut.weight"), &sc.weight);
                    }
                }
            }
        }
        if let Some(fc) = &self.final_conv {
            conv("final_conv".into(), fc, f);
        }
        f("classifier.weight".into(), &self.classifier_w);
        f("classifier.bias".into(), &self.classifier_b);
    }

    /// Mutable twin of [`Model::visit_params`]; identical order.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        let conv = |name: String, c: &mut StandardizedConv, f: &mut dyn FnMut(String, &mut Tensor)| {
            f(format!("{name}.weight"), &mut c.weight);
            if c.standardize {
                f(format!("{name}.gain"), &mut c.gain);
            }
            if let Some(b) = &mut c.bias {
                f(format!("{name}.bias"), b);
            }
        };
        conv("stem".into(), &mut self.stem, f);
        for (i, (_, b)) in self.blocks.iter_mut().enumerate() {
            match b {
                BlockParams::Nf(p) => {
                    conv(format!("block{i}.conv1x1a"), &mut p.conv1x1a, f);
                    conv(format!("block{i}.conv3x3"), &mut p.conv3x3, f);
                    conv(format!("block{i}.conv1x1b"), &mut p.conv1x1b, f);
                    if let Some((sc, _)) = &mut p.shortcut {
                        conv(format!("block{i}.shortcut"), sc, f);
                    }
                    if let Some(se) = &mut p.se {
                        f(format!("block{i}.se.w0"), &mut se.w0);
                        f(format!("block{i}.se.b0"), &mut se.b0);
                        f(format!("block{i}.se.w1"), &mut se.w1);
                        f(format!("block{i}.se.b1"), &mut se.b1);
                    }
                    f(format!("block{i}.skipinit_gain"), &mut p.skipinit_gain);
                }
                BlockParams::Bn(p) => {
                    f(format!("block{i}.conv1x1a.weight"), &mut p.conv1x1a.weight);
                    f(format!("block{i}.conv3x3.weight"), &mut p.conv3x3.weight);
                    f(format!("block{i}.conv1x1b.weight"), &mut p.conv1x1b.weight);
                    if let Some(sc) = &mut p.shortcut {
                        f(format!("block{i}.shortcut.weight"), &mut sc.weight);
                    }
                }
            }
        }
        if let Some(fc) = &mut self.final_conv {
            conv("final_conv".into(), fc, f);
        }
        f("classifier.weight".into(), &mut self.classifier_w);
        f("classifier.bias".into(), &mut self.classifier_b);
    }

    /// Force every SkipInit gain to a value (used to activate branches when
    /// checking ledger fidelity).
    pub fn set_skipinit_gains(&mut self, value: f64) {
        for (_, b) in self.blocks.iter_mut() {
            if let BlockParams::Nf(p) = b {
                p.skipinit_gain = Tensor::filled(Shape::new(1, 1, 1, 1), value, self.dtype);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

fn make_conv(
    spec: ConvSpec,
    use_ws: bool,
    rng: &RngStream,
    lane: &mut u64,
    dtype: Dtype,
) -> Result<StandardizedConv> {
    let mut child = rng.fork(*lane);
    *lane += 1;
    if use_ws {
        StandardizedConv::scaled_ws(spec, &mut child, dtype)
    } else {
        StandardizedConv::plain_he(spec, &mut child, dtype)
    }
}

/// Normalizer-free ResNet: pre-activation bottlenecks with Scaled WS, scaled
/// activations, the alpha/beta ledger, strided transition shortcuts, and a
/// zero-initialized classifier.
pub fn build_nf_resnet(cfg: &ResNetConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let rng = RngStream::new(seed);
    let mut lane = 0u64;
    let widths = cfg.scaled_widths();
    let dtype = cfg.dtype;

    let stem_spec = ConvSpec::new(cfg.in_channels, widths[0], 3, 2, 1);
    let stem = make_conv(stem_spec, cfg.use_scaled_ws, &rng, &mut lane, dtype)?;

    let mut ledger = VarianceLedger::new(cfg.alpha);
    let mut blocks = Vec::new();
    let mut in_ch = widths[0];
    let total_blocks = cfg.total_blocks();
    let mut block_index = 0usize;

    for (si, (&width, &depth)) in widths.iter().zip(&cfg.stage_depths).enumerate() {
        for bi in 0..depth {
            let stride = if bi == 0 && si > 0 && cfg.strided_transitions { 2 } else { 1 };
            let is_transition = stride > 1 || in_ch != width;
            let mid = ((width as f64 * cfg.bottleneck_ratio).round() as usize).max(1);

            let conv1x1a = make_conv(ConvSpec::new(in_ch, mid, 1, 1, 0), cfg.use_scaled_ws, &rng, &mut lane, dtype)?;
            let conv3x3 = make_conv(ConvSpec::new(mid, mid, 3, stride, 1), cfg.use_scaled_ws, &rng, &mut lane, dtype)?;
            let conv1x1b = make_conv(ConvSpec::new(mid, width, 1, 1, 0), cfg.use_scaled_ws, &rng, &mut lane, dtype)?;
            let shortcut = if is_transition {
                let sc = make_conv(
                    ConvSpec::new(in_ch, width, 1, stride, 0),
                    cfg.use_scaled_ws,
                    &rng,
                    &mut lane,
                    dtype,
                )?;
                Some((sc, ShortcutStyle::StridedConv))
            } else {
                None
            };
            let se = if cfg.se_ratio > 0.0 {
                let hidden = ((mid as f64 * cfg.se_ratio).round() as usize).max(1);
                let mut child = rng.fork(lane);
                lane += 1;
                Some(SqueezeExciteParams::he_init(mid, hidden, &mut child, dtype)?)
            } else {
                None
            };
            let sd_rate = if total_blocks > 1 {
                cfg.stochdepth_rate * block_index as f64 / (total_blocks - 1) as f64
            } else {
                0.0
            };

            let beta = ledger.advance(is_transition);
            blocks.push((
                BlockMeta {
                    stage: si,
                    index_in_stage: bi,
                    is_transition,
                    beta,
                    expected_var_after: ledger.expected_var,
                },
                BlockParams::Nf(NfBlockParams {
                    conv1x1a,
                    conv3x3,
                    conv1x1b,
                    shortcut,
                    se,
                    skipinit_gain: Tensor::filled(Shape::new(1, 1, 1, 1), cfg.skipinit_gain_init, dtype),
                    stochdepth_rate: sd_rate,
                    stride,
                }),
            ));
            in_ch = width;
            block_index += 1;
        }
    }

    Ok(Model {
        kind: ModelKind::NfResNet,
        stem,
        blocks,
        ledger,
        final_conv: None,
        classifier_w: Tensor::zeros(Shape::new(cfg.num_classes, 1, 1, in_ch), dtype),
        classifier_b: Tensor::zeros(Shape::new(1, 1, 1, cfg.num_classes), dtype),
        activation: cfg.activation,
        alpha: cfg.alpha,
        dropout_rate: 0.0,
        bn_eps: 1e-5,
        in_channels: cfg.in_channels,
        num_classes: cfg.num_classes,
        dtype,
        seed,
    })
}

/// BatchNorm reference ResNet in the requested ordering. Convolutions use
/// fan-in Gaussian init with the ordering's variance-preserving gain (2 when
/// the conv input is rectified, 1 when it is batch-normalized).
pub fn build_bn_resnet(cfg: &ResNetConfig, ordering: BnOrdering, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let rng = RngStream::new(seed);
    let mut lane = 0u64;
    let widths = cfg.scaled_widths();
    let dtype = cfg.dtype;
    let gain = ordering.init_gain();

    let mut bn_conv = |spec: ConvSpec, lane: &mut u64| -> Result<BnConv> {
        let mut child = rng.fork(*lane);
        *lane += 1;
        Ok(BnConv {
            weight: crate::ops::fan_in_init(&spec, gain, &mut child, dtype)?,
            spec,
        })
    };

    let stem_spec = ConvSpec::new(cfg.in_channels, widths[0], 3, 2, 1);
    let stem_weight = {
        let mut child = rng.fork(lane);
        lane += 1;
        crate::ops::fan_in_init(&stem_spec, 2.0, &mut child, dtype)?
    };
    let stem = StandardizedConv {
        weight: stem_weight,
        gain: Tensor::filled(Shape::new(1, 1, 1, widths[0]), 1.0, dtype),
        bias: None,
        eps: crate::ws::WS_EPS,
        spec: stem_spec,
        standardize: false,
    };

    // Prediction recurrence for the reference model: the branch adds a
    // constant per block; transitions reset the skip to one branch worth.
    let branch_var = ordering.branch_variance();
    let mut expected = 2.0; // stem second moment: gain-2 fan-in conv on unit input
    let mut blocks = Vec::new();
    let mut in_ch = widths[0];

    for (si, (&width, &depth)) in widths.iter().zip(&cfg.stage_depths).enumerate() {
        for bi in 0..depth {
            let stride = if bi == 0 && si > 0 && cfg.strided_transitions { 2 } else { 1 };
            let is_transition = stride > 1 || in_ch != width;
            let mid = ((width as f64 * cfg.bottleneck_ratio).round() as usize).max(1);

            let params = BnBlockParams {
                conv1x1a: bn_conv(ConvSpec::new(in_ch, mid, 1, 1, 0), &mut lane)?,
                conv3x3: bn_conv(ConvSpec::new(mid, mid, 3, stride, 1), &mut lane)?,
                conv1x1b: bn_conv(ConvSpec::new(mid, width, 1, 1, 0), &mut lane)?,
                shortcut: if is_transition {
                    Some(bn_conv(ConvSpec::new(in_ch, width, 1, stride, 0), &mut lane)?)
                } else {
                    None
                },
                eps: 1e-5,
                stride,
            };
            if is_transition {
                expected = branch_var;
            }
            expected += branch_var;
            blocks.push((
                BlockMeta {
                    stage: si,
                    index_in_stage: bi,
                    is_transition,
                    beta: 1.0,
                    expected_var_after: expected,
                },
                BlockParams::Bn(params),
            ));
            in_ch = width;
        }
    }

    Ok(Model {
        kind: ModelKind::BnResNet(ordering),
        stem,
        blocks,
        ledger: VarianceLedger::new(cfg.alpha),
        final_conv: None,
        classifier_w: Tensor::zeros(Shape::new(cfg.num_classes, 1, 1, in_ch), dtype),
        classifier_b: Tensor::zeros(Shape::new(1, 1, 1, cfg.num_classes), dtype),
        activation: ActivationKind::Relu,
        alpha: cfg.alpha,
        dropout_rate: 0.0,
        bn_eps: 1e-5,
        in_channels: cfg.in_channels,
        num_classes: cfg.num_classes,
        dtype,
        seed,
    })
}

/// Normalizer-free RegNet: grouped inverted bottlenecks with corrected
/// squeeze-excite, average-pool transition shortcuts, a final expansion
/// convolution, and a zero-initialized classifier.
pub fn build_nf_regnet(cfg: &NfRegNetConfig, seed: u64) -> Result<Model> {
    if cfg.width_scale <= 0.0 {
        return Err(Error::invalid("width_scale must be positive"));
    }
    let rng = RngStream::new(seed);
    let mut lane = 0u64;
    let dtype = cfg.dtype;
    let widths = cfg.stage_widths();
    let depths = cfg.stage_depths();
    let group_size = cfg.scaled_group_size();

    let stem_spec = ConvSpec::new(cfg.in_channels, widths[0], 3, 2, 1);
    let stem = make_conv(stem_spec, true, &rng, &mut lane, dtype)?;

    let total_blocks: usize = depths.iter().sum();
    let mut ledger = VarianceLedger::new(cfg.alpha);
    let mut blocks = Vec::new();
    let mut in_ch = widths[0];
    let mut index = 0usize;

    for (si, (&stage_width, &stage_depth)) in widths.iter().zip(&depths).enumerate() {
        for bi in 0..stage_depth {
            // Every stage opens with a stride-2 transition.
            let stride = if bi == 0 { 2 } else { 1 };
            let is_transition = stride > 1 || in_ch != stage_width;
            let expansion = if index == 0 { 1.0 } else { cfg.expansion };
            let mut width = (in_ch as f64 * expansion) as usize;
            let groups = (width / group_size).max(1);
            width = (group_size * groups).max(1);

            let conv1x1a = make_conv(ConvSpec::new(in_ch, width, 1, 1, 0), true, &rng, &mut lane, dtype)?;
            let conv3x3 = make_conv(
                ConvSpec::new(width, width, 3, stride, 1).grouped(groups),
                true,
                &rng,
                &mut lane,
                dtype,
            )?;
            let conv1x1b = make_conv(ConvSpec::new(width, stage_width, 1, 1, 0), true, &rng, &mut lane, dtype)?;
            let shortcut = if is_transition {
                let sc = make_conv(
                    ConvSpec::new(in_ch, stage_width, 1, 1, 0),
                    true,
                    &rng,
                    &mut lane,
                    dtype,
                )?;
                Some((sc, ShortcutStyle::AvgPoolConv))
            } else {
                None
            };
            let se_hidden = ((width as f64 * cfg.se_ratio) as usize).max(1);
            let se = {
                let mut child = rng.fork(lane);
                lane += 1;
                Some(SqueezeExciteParams::he_init(width, se_hidden, &mut child, dtype)?)
            };
            let sd_rate = if total_blocks > 1 {
                cfg.stochdepth_rate * index as f64 / (total_blocks - 1) as f64
            } else {
                0.0
            };

            let beta = ledger.advance(is_transition);
            blocks.push((
                BlockMeta {
                    stage: si,
                    index_in_stage: bi,
                    is_transition,
                    beta,
                    expected_var_after: ledger.expected_var,
                },
                BlockParams::Nf(NfBlockParams {
                    conv1x1a,
                    conv3x3,
                    conv1x1b,
                    shortcut,
                    se,
                    skipinit_gain: Tensor::zeros(Shape::new(1, 1, 1, 1), dtype),
                    stochdepth_rate: sd_rate,
                    stride,
                }),
            ));
            in_ch = stage_width;
            index += 1;
        }
    }

    // Final expansion conv before pooling, scaled off the base table.
    let final_ch = (1280 * in_ch) / 440;
    let final_conv = make_conv(ConvSpec::new(in_ch, final_ch, 1, 1, 0), true, &rng, &mut lane, dtype)?;

    Ok(Model {
        kind: ModelKind::NfRegNet,
        stem,
        blocks,
        ledger,
        final_conv: Some(final_conv),
        classifier_w: Tensor::zeros(Shape::new(cfg.num_classes, 1, 1, final_ch), dtype),
        classifier_b: Tensor::zeros(Shape::new(1, 1, 1, cfg.num_classes), dtype),
        activation: cfg.activation,
        alpha: cfg.alpha,
        dropout_rate: cfg.variant.dropout_rate(),
        bn_eps: 1e-5,
        in_channels: cfg.in_channels,
        num_classes: cfg.num_classes,
        dtype,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Run the model, invoking `on_tap` with every block's tap as it is produced
/// (memory-friendly for wide models). Returns the logits.
pub fn model_forward_with(
    model: &Model,
    x: &Tensor,
    mode: Mode,
    rng: &mut RngStream,
    on_tap: &mut impl FnMut(usize, &BlockMeta, BlockTap),
) -> Result<Tensor> {
    if x.shape().c != model.in_channels {
        return Err(Error::invalid(format!(
            "input has {} channels, model expects {}",
            x.shape().c,
            model.in_channels
        )));
    }
    let mut h = model.stem.forward(x)?;
    crate::tensor::ensure_finite(&h, "stem")?;

    for (i, (meta, block)) in model.blocks.iter().enumerate() {
        let tap = match block {
            BlockParams::Nf(p) => {
                nf_block_forward(&h, p, meta.beta, model.alpha, model.activation, mode, rng)
                    .map_err(|e| crate::blocks::tag_block_errors(e, i))?
            }
            BlockParams::Bn(p) => {
                let ordering = match model.kind {
                    ModelKind::BnResNet(o) => o,
                    _ => BnOrdering::BnReluConv,
                };
                bn_block_forward(&h, p, ordering)
                    .map_err(|e| crate::blocks::tag_block_errors(e, i))?
            }
        };
        h = tap.block_out.clone();
        on_tap(i, meta, tap);
    }

    // Head.
    let pooled = match model.kind {
        ModelKind::NfRegNet => {
            let fc = model.final_conv.as_ref().expect("regnet has a final conv");
            let h = activation(&fc.forward(&h)?, model.activation, true);
            global_avg_pool(&h)
        }
        ModelKind::NfResNet => global_avg_pool(&activation(&h, model.activation, true)),
        ModelKind::BnResNet(_) => global_avg_pool(&activation(
            &batch_norm_stats(&h, model.bn_eps)?,
            ActivationKind::Relu,
            false,
        )),
    };
    let pooled = if model.dropout_rate > 0.0 && mode == Mode::Train {
        dropout(&pooled, model.dropout_rate, rng)
    } else {
        pooled
    };
    let logits = linear(&pooled, &model.classifier_w, &model.classifier_b)?;
    crate::tensor::ensure_finite(&logits, "logits")?;
    Ok(logits)
}

/// Forward pass returning the logits and one tap per residual block.
pub fn model_forward(
    model: &Model,
    x: &Tensor,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Tensor, Vec<BlockTap>)> {
    let mut taps = Vec::with_capacity(model.num_blocks());
    let logits = model_forward_with(model, x, mode, rng, &mut |_, _, tap| taps.push(tap))?;
    Ok((logits, taps))
}

/// Inverted dropout on pooled features: kept units are scaled by 1/(1-rate).
pub(crate) fn dropout(x: &Tensor, rate: f64, rng: &mut RngStream) -> Tensor {
    let keep_scale = 1.0 / (1.0 - rate);
    let mut out = x.clone();
    for i in 0..x.len() {
        if rng.next_bernoulli(rate) {
            out.set(i, 0.0);
        } else {
            out.set(i, x.get(i) * keep_scale);
        }
    }
    out
}

/// Ledger entries exposed for plotting; one entry per block.
pub fn ledger_history(model: &Model) -> Vec<LedgerEntry> {
    model
        .blocks
        .iter()
        .enumerate()
        .map(|(i, (meta, _))| LedgerEntry {
            block_index: i,
            beta: meta.beta,
            expected_var: meta.expected_var_after,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian;

    #[test]
    fn regnet_b0_resolved_widths() {
        let cfg = NfRegNetConfig::new(RegNetVariant::B0);
        assert_eq!(cfg.stage_widths(), vec![36, 78, 156, 330]);
        assert_eq!(cfg.stage_depths(), vec![1, 3, 6, 6]);
        let model = build_nf_regnet(&cfg, 0).unwrap();
        assert_eq!(model.num_blocks(), 16);
        // Final expansion conv: 1280 * 330 / 440 = 960.
        assert_eq!(model.final_conv.as_ref().unwrap().spec.out_ch, 960);
    }

    #[test]
    fn regnet_b1_depths() {
        assert_eq!(NfRegNetConfig::new(RegNetVariant::B1).stage_depths(), vec![2, 4, 7, 7]);
    }

    #[test]
    fn block_count_matches_depths() {
        let cfg = ResNetConfig {
            stage_widths: vec![16, 32, 64],
            stage_depths: vec![2, 3, 4],
            ..ResNetConfig::default()
        };
        let m = build_nf_resnet(&cfg, 1).unwrap();
        assert_eq!(m.num_blocks(), 9);
        assert_eq!(m.ledger.history.len(), 9);
    }

    #[test]
    fn no_ws_flag_builds_plain_convs() {
        let cfg = ResNetConfig {
            stage_widths: vec![16],
            stage_depths: vec![2],
            use_scaled_ws: false,
            ..ResNetConfig::default()
        };
        let m = build_nf_resnet(&cfg, 1).unwrap();
        assert!(m.validate_ws_coverage().is_err());
        for (_, b) in &m.blocks {
            if let BlockParams::Nf(p) = b {
                assert!(!p.conv1x1a.standardize);
            }
        }
    }

    #[test]
    fn ws_coverage_holds_for_nf_builds() {
        let cfg = ResNetConfig {
            stage_widths: vec![16, 24],
            stage_depths: vec![1, 2],
            ..ResNetConfig::default()
        };
        build_nf_resnet(&cfg, 3).unwrap().validate_ws_coverage().unwrap();
        let rcfg = NfRegNetConfig { width_scale: 0.25, ..NfRegNetConfig::new(RegNetVariant::B0) };
        build_nf_regnet(&rcfg, 3).unwrap().validate_ws_coverage().unwrap();
    }

    #[test]
    fn bn_param_count_is_ordering_independent() {
        let cfg = ResNetConfig {
            stage_widths: vec![16, 32],
            stage_depths: vec![2, 2],
            ..ResNetConfig::default()
        };
        let a = build_bn_resnet(&cfg, BnOrdering::BnReluConv, 5).unwrap();
        let b = build_bn_resnet(&cfg, BnOrdering::ReluBnConv, 5).unwrap();
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn fresh_model_logits_are_zero_and_taps_counted() {
        let cfg = ResNetConfig {
            stage_widths: vec![16, 32],
            stage_depths: vec![2, 2],
            ..ResNetConfig::default()
        };
        let m = build_nf_resnet(&cfg, 7).unwrap();
        let mut rng = RngStream::new(99);
        let x = gaussian(Shape::new(2, 16, 16, 3), 0.0, 1.0, &mut rng, m.dtype).unwrap();
        let (logits, taps) = model_forward(&m, &x, Mode::Eval, &mut rng).unwrap();
        assert!(logits.to_f64_vec().iter().all(|&v| v == 0.0));
        assert_eq!(taps.len(), 4);

        // Eval determinism.
        let (l2, _) = model_forward(&m, &x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(logits, l2);
    }

    #[test]
    fn rebuild_same_seed_bit_identical() {
        let cfg = NfRegNetConfig { width_scale: 0.25, ..NfRegNetConfig::new(RegNetVariant::B0) };
        let a = build_nf_regnet(&cfg, 42).unwrap();
        let b = build_nf_regnet(&cfg, 42).unwrap();
        let mut pa = Vec::new();
        a.visit_params(&mut |name, t| pa.push((name, t.clone())));
        let mut pb = Vec::new();
        b.visit_params(&mut |name, t| pb.push((name, t.clone())));
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn counters_monotone_in_width_scale() {
        let mut prev_params = 0;
        let mut prev_flops = 0;
        for ws in [0.125, 0.25, 0.5, 1.0] {
            let cfg = NfRegNetConfig { width_scale: ws, ..NfRegNetConfig::new(RegNetVariant::B0) };
            let m = build_nf_regnet(&cfg, 0).unwrap();
            let p = m.param_count();
            let f = m.flop_count(64).unwrap();
            assert!(p > prev_params && f > prev_flops, "ws={ws}: {p} {f}");
            prev_params = p;
            prev_flops = f;
        }
    }

    #[test]
    fn model_config_json_round_trip() {
        let mc = ModelConfig {
            variant: "custom".into(),
            stage_widths: vec![16, 32],
            stage_depths: vec![2, 2],
            alpha: 0.2,
            width_scale: 1.0,
            activation: "relu".into(),
            use_scaled_ws: true,
            ordering: None,
            seed: 3,
        };
        let json = mc.to_json().unwrap();
        assert_eq!(ModelConfig::from_json(&json).unwrap(), mc);
        let m = mc.build().unwrap();
        assert_eq!(m.num_blocks(), 4);

        let bn = ModelConfig {
            ordering: Some("relu-bn-conv".into()),
            use_scaled_ws: false,
            ..mc
        };
        let m = bn.build().unwrap();
        assert!(matches!(m.kind, ModelKind::BnResNet(BnOrdering::ReluBnConv)));
    }
}
