//! Command-line interface: signal propagation plots, gain estimation, output
//! moment verification, gradient checking, the training demo, and config
//! dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or collapse failure.

use crate::autodiff::check::{grad_check, grad_check_model, CheckLoss, GradCheckConfig};
use crate::autodiff::train::{synthetic_task, train_demo, TrainConfig};
use crate::blocks::BnOrdering;
use crate::error::{Error, Result};
use crate::models::{
    build_bn_resnet, build_nf_regnet, build_nf_resnet, Model, ModelConfig, NfRegNetConfig,
    RegNetVariant, ResNetConfig,
};
use crate::ops::{ActivationKind, ConvSpec};
use crate::spp::{emit, fit_stage_growth, generate_spp, SppFormat};
use crate::tensor::{gaussian, Dtype, RngStream, Shape, Tensor};
use crate::ws::{analytic_gamma, estimate_activation_std, fixed_w_moments, monte_carlo_moments};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "nfnet",
    about = "Normalizer-free residual networks with signal propagation instrumentation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a signal propagation plot (CSV/JSON/SVG).
    Spp(SppArgs),
    /// Estimate sigma_g and the gain gamma = 1/sigma_g for an activation.
    Gamma(GammaArgs),
    /// Compare predicted output moments of z = W g(x) against Monte Carlo.
    Moments(MomentsArgs),
    /// Run the central-difference gradient checker.
    Gradcheck(GradcheckArgs),
    /// Train a small normalizer-free model on a synthetic task.
    TrainDemo(TrainDemoArgs),
    /// Print the resolved model configuration as JSON.
    Config(ConfigArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model family: nf-resnet | bn-resnet | nf-regnet.
    #[arg(long, default_value = "nf-resnet")]
    model: String,
    /// JSON model config; inline flags are ignored when set.
    #[arg(long)]
    config: Option<PathBuf>,
    /// NF-RegNet variant (B0..B5).
    #[arg(long, default_value = "B0")]
    variant: String,
    /// Comma-separated blocks per stage.
    #[arg(long, default_value = "3,4,6,3")]
    depths: String,
    /// Comma-separated stage widths (ResNet families).
    #[arg(long, default_value = "64,128,256,512")]
    widths: String,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// BatchNorm ordering: bn-relu-conv | relu-bn-conv.
    #[arg(long)]
    ordering: Option<String>,
    /// Disable weight standardization (plain He init).
    #[arg(long, default_value_t = false)]
    no_ws: bool,
    #[arg(long, default_value_t = 0.25)]
    width_scale: f64,
    /// Activation: relu | silu | tanh | identity.
    #[arg(long, default_value = "relu")]
    activation: String,
    /// SkipInit gain initial value.
    #[arg(long, default_value_t = 0.0)]
    skipinit_gain: f64,
    /// Parameter dtype: single | double.
    #[arg(long, default_value = "single")]
    dtype: String,
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad list entry `{p}`")))
        })
        .collect()
}

impl ModelArgs {
    fn build(&self, seed: u64) -> Result<Model> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            return ModelConfig::from_json(&text)?.build();
        }
        let dtype: Dtype = self.dtype.parse()?;
        match self.model.as_str() {
            "nf-regnet" => {
                let mut cfg = NfRegNetConfig::new(self.variant.parse()?);
                cfg.alpha = self.alpha;
                cfg.width_scale = self.width_scale;
                cfg.activation = self.activation.parse()?;
                cfg.dtype = dtype;
                build_nf_regnet(&cfg, seed)
            }
            "nf-resnet" | "bn-resnet" => {
                let cfg = ResNetConfig {
                    stage_widths: parse_list(&self.widths)?,
                    stage_depths: parse_list(&self.depths)?,
                    alpha: self.alpha,
                    activation: self.activation.parse()?,
                    use_scaled_ws: !self.no_ws,
                    width_scale: self.width_scale,
                    skipinit_gain_init: self.skipinit_gain,
                    dtype,
                    ..ResNetConfig::default()
                };
                if self.model == "bn-resnet" {
                    let ordering: BnOrdering = self
                        .ordering
                        .as_deref()
                        .unwrap_or("bn-relu-conv")
                        .parse()?;
                    build_bn_resnet(&cfg, ordering, seed)
                } else {
                    build_nf_resnet(&cfg, seed)
                }
            }
            other => Err(Error::invalid(format!("unknown model `{other}`"))),
        }
    }

    fn to_model_config(&self, seed: u64) -> Result<ModelConfig> {
        if self.model == "nf-regnet" {
            let cfg = NfRegNetConfig {
                alpha: self.alpha,
                width_scale: self.width_scale,
                ..NfRegNetConfig::new(self.variant.parse::<RegNetVariant>()?)
            };
            return Ok(ModelConfig {
                variant: self.variant.to_uppercase(),
                stage_widths: cfg.stage_widths(),
                stage_depths: cfg.stage_depths(),
                alpha: cfg.alpha,
                width_scale: self.width_scale,
                activation: "silu".into(),
                use_scaled_ws: true,
                ordering: None,
                seed,
            });
        }
        Ok(ModelConfig {
            variant: "custom".into(),
            stage_widths: parse_list(&self.widths)?,
            stage_depths: parse_list(&self.depths)?,
            alpha: self.alpha,
            width_scale: self.width_scale,
            activation: self.activation.clone(),
            use_scaled_ws: !self.no_ws && self.model != "bn-resnet",
            ordering: if self.model == "bn-resnet" {
                Some(self.ordering.clone().unwrap_or_else(|| "bn-relu-conv".into()))
            } else {
                None
            },
            seed,
        })
    }
}

#[derive(Args)]
struct SppArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Input resolution (square).
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "spp.csv")]
    out: PathBuf,
    /// csv | json | svg.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct GammaArgs {
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the gain registry JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MomentsArgs {
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail (exit 2) if any |z| exceeds this.
    #[arg(long)]
    max_z: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ops | model | all.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainDemoArgs {
    #[arg(long, default_value_t = 16)]
    blocks: usize,
    #[arg(long, default_value_t = 0.25)]
    width_scale: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for losses.csv and spp_after.csv.
    #[arg(long, default_value = "train_demo_out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary and by tests. Returns the process exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    configure_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Spp(a) => cmd_spp(a),
        Cmd::Gamma(a) => cmd_gamma(a),
        Cmd::Moments(a) => cmd_moments(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::TrainDemo(a) => cmd_train_demo(a),
        Cmd::Config(a) => cmd_config(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// NF_THREADS caps the rayon pool; unset uses all cores.
fn configure_threads() {
    if let Ok(v) = std::env::var("NF_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn cmd_spp(a: SppArgs) -> Result<i32> {
    let model = a.model.build(a.seed)?;
    model.validate_ws_coverage().ok(); // BN models skip; NF enforced below
    if !a.model.no_ws && a.model.model != "bn-resnet" {
        model.validate_ws_coverage()?;
    }
    let batch = Shape::new(a.batch, a.res, a.res, model.in_channels);
    let records = generate_spp(&model, batch, a.seed)?;
    let format: SppFormat = a.format.parse()?;
    emit(&records, format, &a.out)?;

    let mean_resid =
        records.iter().map(|r| r.residual_var).sum::<f64>() / records.len() as f64;
    let max_sq_ratio = records
        .iter()
        .map(|r| r.avg_sq_mean / r.avg_var.max(1e-300))
        .fold(0.0, f64::max);
    println!(
        "wrote {} records to {} (mean residual_var {:.4}, max sq_mean/var {:.4})",
        records.len(),
        a.out.display(),
        mean_resid,
        max_sq_ratio
    );
    let report = fit_stage_growth(&records, model.alpha);
    for s in &report.stages {
        println!(
            "stage {}: slope {:.4} intercept {:.4} mean_residual_var {:.4} max_ledger_err {:.3}",
            s.stage_index, s.slope, s.intercept, s.mean_residual_var, s.max_rel_ledger_err
        );
    }
    Ok(0)
}

fn cmd_gamma(a: GammaArgs) -> Result<i32> {
    let kind: ActivationKind = a.activation.parse()?;
    let mut rng = RngStream::new(a.seed);
    let sigma = estimate_activation_std(kind, a.dim, a.samples, &mut rng)?;
    let gamma = 1.0 / sigma;
    println!("activation {kind}: sigma_g {sigma:.6} gamma {gamma:.6}");
    match analytic_gamma(kind) {
        Ok(exact) => println!("analytic gamma {exact:.6}"),
        Err(_) => println!("analytic gamma: none (estimator is canonical)"),
    }
    if let Some(path) = a.out {
        std::fs::write(&path, crate::ws::gain_registry_json()?).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        println!("gain registry written to {}", path.display());
    }
    Ok(0)
}

fn cmd_moments(a: MomentsArgs) -> Result<i32> {
    let kind: ActivationKind = a.activation.parse()?;
    let mut rng = RngStream::new(a.seed);
    let w = gaussian(
        Shape::new(a.rows, 1, 1, a.cols),
        0.3,
        0.8,
        &mut rng,
        Dtype::Double,
    )?;
    let pred = fixed_w_moments(&w, kind.mu_g(), kind.sigma_g());
    let (means, vars, se_m, se_v) = monte_carlo_moments(&w, kind, a.samples, &mut rng);
    let mut max_z = 0.0f64;
    println!("unit  pred_mean     mc_mean       z_mean  pred_var      mc_var        z_var");
    for i in 0..a.rows {
        let zm = (means[i] - pred.means[i]).abs() / se_m[i];
        let zv = (vars[i] - pred.variances[i]).abs() / se_v[i];
        max_z = max_z.max(zm).max(zv);
        println!(
            "{i:<5} {:<13.6} {:<13.6} {zm:<7.2} {:<13.6} {:<13.6} {zv:<7.2}",
            pred.means[i], means[i], pred.variances[i], vars[i]
        );
    }
    println!("max |z| = {max_z:.3} over {} samples", a.samples);
    if let Some(limit) = a.max_z {
        if max_z > limit {
            return Err(Error::invalid(format!("max |z| {max_z:.3} exceeds {limit}")));
        }
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = GradCheckConfig {
        fd_step: a.fd_step,
        tolerance: a.tolerance,
        max_coords_per_param: Some(24),
    };
    let mut failed = false;
    if a.scope == "ops" || a.scope == "all" {
        for (name, report) in op_checks(a.seed, &cfg)? {
            let status = if report.passed() { "ok" } else { "FAIL" };
            println!("op {name:<24} max rel err {:>10.3e}  {status}", report.max_rel_err());
            failed |= !report.passed();
        }
    }
    if a.scope == "model" || a.scope == "all" {
        let cfg_model = ResNetConfig {
            stage_widths: vec![8, 12],
            stage_depths: vec![2, 2],
            activation: ActivationKind::Silu,
            se_ratio: 0.5,
            dtype: Dtype::Double,
            num_classes: 3,
            ..ResNetConfig::default()
        };
        let model = build_nf_resnet(&cfg_model, a.seed)?;
        let mut rng = RngStream::new(a.seed ^ 77);
        let x = gaussian(Shape::new(2, 8, 8, 3), 0.0, 1.0, &mut rng, Dtype::Double)?;
        let report = grad_check_model(&model, &x, &CheckLoss::CrossEntropy(vec![0, 2]), &cfg)?;
        let status = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "model (4-block nf-resnet)     max rel err {:>10.3e}  {status}",
            report.max_rel_err()
        );
        failed |= !report.passed();
    }
    if !["ops", "model", "all"].contains(&a.scope.as_str()) {
        return Err(Error::invalid(format!("unknown scope `{}`", a.scope)));
    }
    if failed {
        Err(Error::invalid("gradient check failed"))
    } else {
        Ok(0)
    }
}

/// Per-operation gradient checks on small random shapes.
pub fn op_checks(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<(String, crate::autodiff::check::GradReport)>> {
    let mut out = Vec::new();
    let mut rng = RngStream::new(seed);

    // Avoid relu kinks: keep preactivations away from zero.
    let dekink = |t: Tensor| t.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });

    // conv2d over three shapes (plain, strided, grouped).
    for (i, spec) in [
        ConvSpec::new(3, 4, 3, 1, 1),
        ConvSpec::new(4, 6, 3, 2, 1),
        ConvSpec::new(6, 6, 3, 1, 1).grouped(3),
    ]
    .into_iter()
    .enumerate()
    {
        let x = gaussian(Shape::new(2, 6, 6, spec.in_ch), 0.0, 1.0, &mut rng, Dtype::Double)?;
        let params = vec![
            ("w".into(), gaussian(spec.weight_shape(), 0.0, 0.5, &mut rng, Dtype::Double)?),
            ("b".into(), gaussian(Shape::new(1, 1, 1, spec.out_ch), 0.0, 0.3, &mut rng, Dtype::Double)?),
        ];
        let report = grad_check(&params, cfg, |tape, ids| {
            let xi = tape.input(x.clone())?;
            let y = tape.conv2d(xi, ids[0], Some(ids[1]), spec)?;
            let a = tape.activation(y, ActivationKind::Tanh, false);
            Ok(tape.sum(a))
        })?;
        out.push((format!("conv2d[{i}]"), report));
    }

    // ws_standardize through a conv.
    let spec = ConvSpec::new(2, 3, 3, 1, 1);
    let x = gaussian(Shape::new(2, 5, 5, 2), 0.0, 1.0, &mut rng, Dtype::Double)?;
    let params = vec![
        ("w".into(), gaussian(spec.weight_shape(), 0.0, 0.4, &mut rng, Dtype::Double)?),
        ("gain".into(), gaussian(Shape::new(1, 1, 1, 3), 1.0, 0.1, &mut rng, Dtype::Double)?),
    ];
    let report = grad_check(&params, cfg, |tape, ids| {
        let xi = tape.input(x.clone())?;
        let ws = tape.ws_standardize(ids[0], ids[1], 1e-4)?;
        let y = tape.conv2d(xi, ws, None, spec)?;
        Ok(tape.sum(y))
    })?;
    out.push(("ws_standardize".into(), report));

    // Activations (relu inputs nudged off the kink).
    for kind in ActivationKind::all() {
        for scaled in [false, true] {
            let x = dekink(gaussian(Shape::new(2, 3, 3, 4), 0.0, 1.0, &mut rng, Dtype::Double)?);
            let params = vec![("x".into(), x)];
            let report = grad_check(&params, cfg, |tape, ids| {
                let a = tape.activation(ids[0], kind, scaled);
                let shape = tape.value(a).shape();
                let sq = tape.mul_mask(a, tape_weighting(shape))?;
                Ok(tape.sum(sq))
            })?;
            out.push((format!("activation[{kind},scaled={scaled}]"), report));
        }
    }

    // batch_norm_stats.
    let x = gaussian(Shape::new(2, 4, 4, 3), 0.3, 1.5, &mut rng, Dtype::Double)?;
    let params = vec![("x".into(), x)];
    let report = grad_check(&params, cfg, |tape, ids| {
        let y = tape.batch_norm(ids[0], 1e-5)?;
        let a = tape.activation(y, ActivationKind::Silu, false);
        Ok(tape.sum(a))
    })?;
    out.push(("batch_norm_stats".into(), report));

    // avg_pool2d + global_avg_pool.
    let x = gaussian(Shape::new(2, 4, 4, 3), 0.0, 1.0, &mut rng, Dtype::Double)?;
    let params = vec![("x".into(), x)];
    let report = grad_check(&params, cfg, |tape, ids| {
        let p = tape.avg_pool(ids[0], 2)?;
        let g = tape.global_avg_pool(p);
        let a = tape.activation(g, ActivationKind::Silu, false);
        Ok(tape.sum(a))
    })?;
    out.push(("avg_pool/global_pool".into(), report));

    // sigmoid + channel gate (squeeze-excite core).
    let x = gaussian(Shape::new(2, 3, 3, 4), 0.0, 1.0, &mut rng, Dtype::Double)?;
    let g = gaussian(Shape::new(2, 1, 1, 4), 0.0, 1.0, &mut rng, Dtype::Double)?;
    let params = vec![("x".into(), x), ("g".into(), g)];
    let report = grad_check(&params, cfg, |tape, ids| {
        let s = tape.sigmoid(ids[1]);
        let s = tape.scale_const(s, 2.0);
        let y = tape.mul_channel_gate(ids[0], s)?;
        Ok(tape.sum(y))
    })?;
    out.push(("sigmoid/channel_gate".into(), report));

    // linear + softmax cross-entropy.
    let x = gaussian(Shape::new(3, 1, 1, 5), 0.0, 1.0, &mut rng, Dtype::Double)?;
    let params = vec![
        ("w".into(), gaussian(Shape::new(4, 1, 1, 5), 0.0, 0.5, &mut rng, Dtype::Double)?),
        ("b".into(), gaussian(Shape::new(1, 1, 1, 4), 0.0, 0.2, &mut rng, Dtype::Double)?),
    ];
    let report = grad_check(&params, cfg, |tape, ids| {
        let xi = tape.input(x.clone())?;
        let y = tape.linear(xi, ids[0], ids[1])?;
        tape.softmax_cross_entropy(y, &[0, 3, 1])
    })?;
    out.push(("linear/cross_entropy".into(), report));

    // scale_by_scalar (SkipInit) + add.
    let x = gaussian(Shape::new(2, 3, 3, 3), 0.0, 1.0, &mut rng, Dtype::Double)?;
    let y = gaussian(Shape::new(2, 3, 3, 3), 0.0, 1.0, &mut rng, Dtype::Double)?;
    let params = vec![
        ("s".into(), Tensor::zeros(Shape::new(1, 1, 1, 1), Dtype::Double)),
        ("y".into(), y),
    ];
    let report = grad_check(&params, cfg, |tape, ids| {
        let xi = tape.input(x.clone())?;
        let scaled = tape.scale_by_scalar(ids[1], ids[0])?;
        let added = tape.add(xi, scaled)?;
        let t = tape.activation(added, ActivationKind::Tanh, false);
        Ok(tape.sum(t))
    })?;
    out.push(("skipinit/add".into(), report));

    Ok(out)
}

/// Non-uniform weights for sum losses so symmetric errors cannot cancel.
fn tape_weighting(shape: Shape) -> Tensor {
    Tensor::from_fn(shape, Dtype::Double, |n, h, w, c| {
        0.3 + 0.1 * n as f64 + 0.07 * h as f64 + 0.05 * w as f64 + 0.02 * c as f64
    })
}

fn cmd_train_demo(a: TrainDemoArgs) -> Result<i32> {
    if a.blocks % 2 != 0 {
        return Err(Error::invalid("--blocks must be even (two stages)"));
    }
    let cfg_model = ResNetConfig {
        stage_widths: vec![64, 64],
        stage_depths: vec![a.blocks / 2, a.blocks / 2],
        width_scale: a.width_scale,
        dtype: Dtype::Double,
        num_classes: a.classes,
        ..ResNetConfig::default()
    };
    let mut model = build_nf_resnet(&cfg_model, a.seed)?;
    let task = synthetic_task(a.classes, a.samples, a.res, a.seed ^ 0x7a5f)?;
    let tcfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        seed: a.seed,
    };
    let report = train_demo(&mut model, &task, &tcfg)?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.display().to_string(),
        source: e,
    })?;
    let loss_path = a.out_dir.join("losses.csv");
    std::fs::write(&loss_path, report.loss_csv()).map_err(|e| Error::Io {
        path: loss_path.display().to_string(),
        source: e,
    })?;
    let spp_path = a.out_dir.join("spp_after.csv");
    let records = generate_spp(&model, Shape::new(16, a.res, a.res, 3), a.seed)?;
    emit(&records, SppFormat::Csv, &spp_path)?;

    println!(
        "initial loss {:.4}, final loss {:.4}, train accuracy {:.3}",
        report.initial_loss(),
        report.final_loss(),
        report.final_train_accuracy
    );
    println!("wrote {} and {}", loss_path.display(), spp_path.display());
    Ok(0)
}

fn cmd_config(a: ConfigArgs) -> Result<i32> {
    let mc = a.model.to_model_config(a.seed)?;
    let json = mc.to_json()?;
    match a.out {
        Some(path) => std::fs::write(&path, &json).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?,
        None => println!("{json}"),
    }
    Ok(0)
}
