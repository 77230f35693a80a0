//! Scaled Weight Standardization and nonlinearity gain determination.
//!
//! The reparameterization maps an underlying weight `W` to
//! `W_hat = gain * (W - mu) / sqrt(var * N + eps)` per output channel, where
//! `mu`/`var` are the population statistics over the fan-in extent and `N` is
//! the fan-in. Rows of `W_hat` have exactly zero mean, which kills the
//! mean shift a positive-mean nonlinearity would otherwise inject, and unit
//! norm up to the eps correction, which preserves variance.
//!
//! The activation-specific gain `gamma = 1/sigma_g` is baked into the scaled
//! nonlinearity (see [`crate::ops::activation`]) rather than into the weight,
//! so one convolution implementation serves every activation; the learnable
//! affine gain stays in the weight.

use crate::error::{Error, Result};
use crate::ops::{activation, conv2d, he_init, ActivationKind, ConvSpec};
use crate::tensor::{gaussian, Dtype, RngStream, Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A convolution whose effective weight is re-standardized on every forward
/// pass. `standardize = false` degrades it to a plain convolution over the
/// same storage (the He-init failure case).
#[derive(Clone, Debug)]
pub struct StandardizedConv {
    pub weight: Tensor,
    /// Learnable per-output-channel affine gain, shape (1,1,1,out), init 1.
    pub gain: Tensor,
    /// Learnable per-output-channel bias added to the conv output, init 0.
    pub bias: Option<Tensor>,
    pub eps: f64,
    pub spec: ConvSpec,
    pub standardize: bool,
}

pub const WS_EPS: f64 = 1e-4;

impl StandardizedConv {
    /// Scaled-WS convolution over He-initialized storage.
    pub fn scaled_ws(spec: ConvSpec, rng: &mut RngStream, dtype: Dtype) -> Result<Self> {
        spec.validate()?;
        if spec.fan_in() < 2 {
            return Err(Error::invalid(format!(
                "weight standardization needs fan_in >= 2, got {}",
                spec.fan_in()
            )));
        }
        Ok(StandardizedConv {
            weight: he_init(&spec, rng, dtype)?,
            gain: Tensor::filled(Shape::new(1, 1, 1, spec.out_ch), 1.0, dtype),
            bias: Some(Tensor::zeros(Shape::new(1, 1, 1, spec.out_ch), dtype)),
            eps: WS_EPS,
            spec,
            standardize: true,
        })
    }

    /// Plain He-initialized convolution (standardization disabled).
    pub fn plain_he(spec: ConvSpec, rng: &mut RngStream, dtype: Dtype) -> Result<Self> {
        spec.validate()?;
        Ok(StandardizedConv {
            weight: he_init(&spec, rng, dtype)?,
            gain: Tensor::filled(Shape::new(1, 1, 1, spec.out_ch), 1.0, dtype),
            bias: Some(Tensor::zeros(Shape::new(1, 1, 1, spec.out_ch), dtype)),
            eps: WS_EPS,
            spec,
            standardize: false,
        })
    }

    /// Plain convolution with an explicit fan-in init gain and no bias (the
    /// BatchNorm reference networks absorb biases into the normalizer).
    pub fn plain_fan_in(spec: ConvSpec, gain: f64, rng: &mut RngStream, dtype: Dtype) -> Result<Self> {
        spec.validate()?;
        Ok(StandardizedConv {
            weight: crate::ops::fan_in_init(&spec, gain, rng, dtype)?,
            gain: Tensor::filled(Shape::new(1, 1, 1, spec.out_ch), 1.0, dtype),
            bias: None,
            eps: WS_EPS,
            spec,
            standardize: false,
        })
    }

    /// The weight actually convolved with: standardized or raw.
    pub fn effective_weight(&self) -> Tensor {
        if self.standardize {
            standardize_weight(self)
        } else {
            self.weight.clone()
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.effective_weight(), self.bias.as_ref(), &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.gain.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// `W_hat = gain * (W - mu) / sqrt(var * N + eps)` per output channel.
///
/// Row statistics are computed in double precision over the fan-in extent,
/// with population variance. An all-constant row has `var = 0` and maps to
/// zero through the eps guard. Recomputed on every call; callers must not
/// cache across weight updates.
pub fn standardize_weight(sc: &StandardizedConv) -> Tensor {
    standardize_weight_raw(&sc.weight, &sc.gain, sc.eps)
}

/// Standardization over a raw (weight, gain, eps) triple; rows are the first
/// axis, the fan-in extent is everything else.
pub fn standardize_weight_raw(weight: &Tensor, gain: &Tensor, eps: f64) -> Tensor {
    let shape = weight.shape();
    let fan_in = shape.h * shape.w * shape.c;
    debug_assert!(fan_in >= 2, "standardize_weight requires fan_in >= 2");
    let n = fan_in as f64;
    let mut out = weight.clone();
    for o in 0..shape.n {
        let base = o * fan_in;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for i in 0..fan_in {
            let v = weight.get(base + i);
            sum += v;
            sum_sq += v * v;
        }
        let mu = sum / n;
        let var = (sum_sq / n - mu * mu).max(0.0);
        let scale = gain.get(o) / (var * n + eps).sqrt();
        for i in 0..fan_in {
            out.set(base + i, (weight.get(base + i) - mu) * scale);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Gain determination
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of `sigma_g`: draw `n_vectors` unit-Gaussian vectors
/// of length `dim`, average their per-vector population variances of `g(x)`,
/// and take the square root. `gamma = 1 / sigma_hat`.
pub fn estimate_activation_std(
    kind: ActivationKind,
    dim: usize,
    n_vectors: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if dim < 2 {
        return Err(Error::invalid("estimate_activation_std needs dim >= 2"));
    }
    if n_vectors < 1 {
        return Err(Error::invalid("estimate_activation_std needs n_vectors >= 1"));
    }
    let inv = 1.0 / dim as f64;
    let mut acc = 0.0f64;
    for _ in 0..n_vectors {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..dim {
            let g = kind.apply(rng.next_gaussian());
            sum += g;
            sum_sq += g * g;
        }
        let mean = sum * inv;
        acc += (sum_sq * inv - mean * mean).max(0.0);
    }
    Ok((acc / n_vectors as f64).sqrt())
}

/// Closed-form gain `gamma = 1/sigma_g` for activations with a known
/// rectified-moment solution. Others must use [`estimate_activation_std`].
pub fn analytic_gamma(kind: ActivationKind) -> Result<f64> {
    match kind {
        // Var(relu(x)) = (1/2)(1 - 1/pi) under x ~ N(0,1).
        ActivationKind::Relu => Ok(std::f64::consts::SQRT_2 / (1.0 - 1.0 / std::f64::consts::PI).sqrt()),
        ActivationKind::Identity => Ok(1.0),
        other => Err(Error::NoClosedFormGain {
            activation: other.to_string(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Fixed-weight output moments
// ---------------------------------------------------------------------------

/// Predicted per-unit mean and variance of `z = W g(x)` for a fixed `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPrediction {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// For `z_i = sum_j W_ij g(x_j)` with `g(x_j)` iid of mean `mu_g` and std
/// `sigma_g`:
///
/// `E(z_i) = N * mu_g * mu_Wi`  and  `Var(z_i) = N * sigma_g^2 * (var_Wi + mu_Wi^2)`
///
/// where `mu_Wi`/`var_Wi` are the mean and population variance of row `i`.
/// A nonzero row mean therefore turns a positive-mean activation into a
/// nonzero output mean; rows centered to exactly zero mean eliminate it.
pub fn fixed_w_moments(w: &Tensor, mu_g: f64, sigma_g: f64) -> MomentPrediction {
    let shape = w.shape();
    let fan_in = shape.h * shape.w * shape.c;
    let n = fan_in as f64;
    let mut means = Vec::with_capacity(shape.n);
    let mut variances = Vec::with_capacity(shape.n);
    for o in 0..shape.n {
        let base = o * fan_in;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for i in 0..fan_in {
            let v = w.get(base + i);
            sum += v;
            sum_sq += v * v;
        }
        let mu_w = sum / n;
        let var_w = (sum_sq / n - mu_w * mu_w).max(0.0);
        means.push(n * mu_g * mu_w);
        variances.push(n * sigma_g * sigma_g * (var_w + mu_w * mu_w));
    }
    MomentPrediction { means, variances }
}

// ---------------------------------------------------------------------------
// Gain registry
// ---------------------------------------------------------------------------

/// Serializable record of how each activation's `sigma_g` was obtained.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GainEntry {
    pub sigma_g: f64,
    /// Estimation seed for Monte Carlo entries; `None` for analytic values.
    pub seed: Option<u64>,
    pub n_vectors: Option<usize>,
}

/// The built-in registry: relu and identity analytic; silu pinned to the
/// reference constant 0.5595; tanh frozen from the estimator (seed 7,
/// dim 256, 2^20 vectors).
pub fn gain_registry() -> BTreeMap<String, GainEntry> {
    let mut m = BTreeMap::new();
    m.insert(
        "relu".to_string(),
        GainEntry { sigma_g: ActivationKind::Relu.sigma_g(), seed: None, n_vectors: None },
    );
    m.insert(
        "identity".to_string(),
        GainEntry { sigma_g: 1.0, seed: None, n_vectors: None },
    );
    m.insert(
        "silu".to_string(),
        GainEntry { sigma_g: ActivationKind::Silu.sigma_g(), seed: None, n_vectors: None },
    );
    m.insert(
        "tanh".to_string(),
        GainEntry {
            sigma_g: ActivationKind::Tanh.sigma_g(),
            seed: Some(7),
            n_vectors: Some(1 << 20),
        },
    );
    m
}

pub fn gain_registry_json() -> Result<String> {
    Ok(serde_json::to_string_pretty(&gain_registry())?)
}

pub fn gain_registry_from_json(s: &str) -> Result<BTreeMap<String, GainEntry>> {
    Ok(serde_json::from_str(s)?)
}

// ---------------------------------------------------------------------------

/// Forward + moment check helper used by tests and the `moments` subcommand:
/// Monte Carlo sample `z = W g(x)` and return per-unit (mean, variance,
/// se_mean, se_var) over `samples` draws.
pub fn monte_carlo_moments(
    w: &Tensor,
    kind: ActivationKind,
    samples: usize,
    rng: &mut RngStream,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let shape = w.shape();
    let fan_in = shape.h * shape.w * shape.c;
    let rows = shape.n;
    let mut sum = vec![0.0f64; rows];
    let mut sum2 = vec![0.0f64; rows];
    let mut sum3 = vec![0.0f64; rows];
    let mut sum4 = vec![0.0f64; rows];
    let mut g = vec![0.0f64; fan_in];
    for _ in 0..samples {
        for gj in g.iter_mut() {
            *gj = kind.apply(rng.next_gaussian());
        }
        for i in 0..rows {
            let base = i * fan_in;
            let mut z = 0.0f64;
            for (j, &gj) in g.iter().enumerate() {
                z += w.get(base + j) * gj;
            }
            sum[i] += z;
            sum2[i] += z * z;
            sum3[i] += z * z * z;
            sum4[i] += z * z * z * z;
        }
    }
    let m = samples as f64;
    let mut means = Vec::with_capacity(rows);
    let mut vars = Vec::with_capacity(rows);
    let mut se_means = Vec::with_capacity(rows);
    let mut se_vars = Vec::with_capacity(rows);
    for i in 0..rows {
        let mean = sum[i] / m;
        let var = (sum2[i] / m - mean * mean).max(0.0);
        // Central fourth moment via raw moments.
        let m2 = sum2[i] / m;
        let m3 = sum3[i] / m;
        let m4 = sum4[i] / m;
        let mu4 = m4 - 4.0 * mean * m3 + 6.0 * mean * mean * m2 - 3.0 * mean.powi(4);
        means.push(mean);
        vars.push(var);
        se_means.push((var / m).sqrt());
        se_vars.push(((mu4 - var * var).max(0.0) / m).sqrt());
    }
    (means, vars, se_means, se_vars)
}

/// Mean-shift demonstration used by tests: empirical z = W_hat g(x) moments.
pub fn ws_conv_output(
    sc: &StandardizedConv,
    x: &Tensor,
    kind: ActivationKind,
    scaled: bool,
) -> Result<Tensor> {
    let g = activation(x, kind, scaled);
    conv2d(&g, &sc.effective_weight(), None, &sc.spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{avg_channel_variance, channel_means, channel_variances};
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    fn conv_from_weight(w: Tensor, gain: Vec<f64>, eps: f64, spec: ConvSpec) -> StandardizedConv {
        let out = spec.out_ch;
        StandardizedConv {
            weight: w,
            gain: Tensor::from_f64(Shape::new(1, 1, 1, out), gain),
            bias: None,
            eps,
            spec,
            standardize: true,
        }
    }

    #[test]
    fn standardize_two_element_row() {
        // Row [1, -1]: mu = 0, population var = 1, N = 2 -> [1/sqrt(2), -1/sqrt(2)].
        let spec = ConvSpec::new(2, 1, 1, 1, 0);
        let w = Tensor::from_f64(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]);
        let sc = conv_from_weight(w, vec![1.0], 0.0, spec);
        let ws = standardize_weight(&sc);
        let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;
        assert!((ws.get(0) - inv_sqrt2).abs() < 1e-15);
        assert!((ws.get(1) + inv_sqrt2).abs() < 1e-15);
    }

    #[test]
    fn standardized_rows_have_zero_mean() {
        let spec = ConvSpec::new(6, 5, 3, 1, 1);
        let mut rng = RngStream::new(3);
        let sc = StandardizedConv::scaled_ws(spec, &mut rng, Dtype::Double).unwrap();
        let ws = standardize_weight(&sc);
        let fan_in = spec.fan_in();
        for o in 0..5 {
            let mean: f64 = (0..fan_in).map(|i| ws.get(o * fan_in + i)).sum::<f64>() / fan_in as f64;
            assert!(mean.abs() < 1e-12, "row {o} mean {mean}");
        }
    }

    #[test]
    fn standardized_row_norms_near_one_at_large_fan_in() {
        // fan_in 1152 (128 * 3 * 3), He storage, gain 1, eps 1e-4:
        // sum of squares = var*N/(var*N + eps) with var*N ~ 2.
        let spec = ConvSpec::new(128, 8, 3, 1, 1);
        let mut rng = RngStream::new(5);
        let sc = StandardizedConv::scaled_ws(spec, &mut rng, Dtype::Double).unwrap();
        let ws = standardize_weight(&sc);
        let fan_in = spec.fan_in();
        assert_eq!(fan_in, 1152);
        for o in 0..8 {
            let ss: f64 = (0..fan_in).map(|i| ws.get(o * fan_in + i).powi(2)).sum();
            assert!((0.98..=1.0).contains(&ss), "row {o} sum of squares {ss}");
        }
    }

    #[test]
    fn constant_row_maps_to_zero() {
        let spec = ConvSpec::new(4, 2, 1, 1, 0);
        let w = Tensor::from_f64(
            Shape::new(2, 1, 1, 4),
            vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0],
        );
        let sc = conv_from_weight(w, vec![1.0, 1.0], WS_EPS, spec);
        let ws = standardize_weight(&sc);
        for i in 0..4 {
            assert_eq!(ws.get(i), 0.0);
        }
        // Non-degenerate row is untouched by the guard.
        assert!(ws.get(4) != 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shift_and_scale_invariance(
            vals in proptest::collection::vec(-2.0f64..2.0, 8),
            a in 0.1f64..5.0,
            c in -3.0f64..3.0,
        ) {
            // Guard against degenerate rows.
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            prop_assume!(var > 1e-3);

            let spec = ConvSpec::new(8, 1, 1, 1, 0);
            let w = Tensor::from_f64(Shape::new(1, 1, 1, 8), vals.clone());
            let wt = Tensor::from_f64(Shape::new(1, 1, 1, 8), vals.iter().map(|v| a * v + c).collect());
            let s1 = standardize_weight(&conv_from_weight(w, vec![1.0], 0.0, spec));
            let s2 = standardize_weight(&conv_from_weight(wt, vec![1.0], 0.0, spec));
            for i in 0..8 {
                prop_assert!((s1.get(i) - s2.get(i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn estimator_reference_values() {
        let mut rng = RngStream::new(0);
        let id = estimate_activation_std(ActivationKind::Identity, 256, 1024, &mut rng).unwrap();
        assert!((id - 1.0).abs() < 0.01, "identity {id}");

        let mut rng = RngStream::new(0);
        let r = estimate_activation_std(ActivationKind::Relu, 256, 1024, &mut rng).unwrap();
        assert!(rel(r, 0.5838) < 0.01, "relu {r}");

        let mut rng = RngStream::new(0);
        let s = estimate_activation_std(ActivationKind::Silu, 256, 1024, &mut rng).unwrap();
        assert!(rel(s, 0.5595) < 0.01, "silu {s}");

        let mut rng = RngStream::new(0);
        let t = estimate_activation_std(ActivationKind::Tanh, 256, 1024, &mut rng).unwrap();
        assert!(rel(t, ActivationKind::Tanh.sigma_g()) < 0.01, "tanh {t}");
    }

    #[test]
    fn estimator_converges_at_root_n() {
        // Quadrupling the vector count should roughly halve the spread of the
        // estimate across seeds.
        let spread = |n_vectors: usize| {
            let xs: Vec<f64> = (0..24)
                .map(|s| {
                    let mut rng = RngStream::new(900 + s);
                    estimate_activation_std(ActivationKind::Relu, 256, n_vectors, &mut rng).unwrap()
                })
                .collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let ratio = spread(256) / spread(4096);
        assert!(
            (2.5..=6.5).contains(&ratio),
            "spread ratio over 16x vectors: {ratio}"
        );
    }

    #[test]
    fn analytic_gamma_values() {
        let g = analytic_gamma(ActivationKind::Relu).unwrap();
        let exact = std::f64::consts::SQRT_2 / (1.0 - 1.0 / std::f64::consts::PI).sqrt();
        assert!((g - exact).abs() < 1e-14);
        assert!(rel(g, 1.7139) < 0.01, "relu gamma {g}"); // 4 s.f. reference
        assert_eq!(analytic_gamma(ActivationKind::Identity).unwrap(), 1.0);
        assert!(analytic_gamma(ActivationKind::Silu).is_err());
    }

    #[test]
    fn moment_prediction_substitutions() {
        let w = Tensor::from_f64(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]);
        let p = fixed_w_moments(&w, 0.5, 0.5);
        assert!((p.means[0] - 1.0).abs() < 1e-15);
        assert!((p.variances[0] - 0.5).abs() < 1e-15);

        // Zero-mean row with sigma_g = 1: E = 0, Var = N * var_W.
        let w = Tensor::from_f64(Shape::new(1, 1, 1, 4), vec![1.0, -1.0, 2.0, -2.0]);
        let p = fixed_w_moments(&w, 0.7, 1.0);
        assert_eq!(p.means[0], 0.0);
        assert!((p.variances[0] - 4.0 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn moments_match_monte_carlo() {
        let mut rng = RngStream::new(41);
        let w = gaussian(Shape::new(4, 1, 1, 8), 0.3, 0.8, &mut rng, Dtype::Double).unwrap();
        let kind = ActivationKind::Relu;
        let pred = fixed_w_moments(&w, kind.mu_g(), kind.sigma_g());
        let (means, vars, se_m, se_v) = monte_carlo_moments(&w, kind, 1_000_000, &mut rng);
        for i in 0..4 {
            let zm = (means[i] - pred.means[i]).abs() / se_m[i];
            let zv = (vars[i] - pred.variances[i]).abs() / se_v[i];
            assert!(zm <= 3.0, "unit {i} mean z-score {zm}");
            assert!(zv <= 3.0, "unit {i} var z-score {zv}");
        }
    }

    #[test]
    fn mean_shift_eliminated_by_standardization() {
        // z = W_hat relu(x): per-channel output means stay at the Monte Carlo
        // noise floor because W_hat rows sum to zero.
        let spec = ConvSpec::new(256, 64, 1, 1, 0);
        let mut rng = RngStream::new(23);
        let sc = StandardizedConv {
            bias: None,
            ..StandardizedConv::scaled_ws(spec, &mut rng, Dtype::Double).unwrap()
        };
        let x = gaussian(Shape::new(4, 16, 16, 256), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
        let z = ws_conv_output(&sc, &x, ActivationKind::Relu, true).unwrap();
        let n_samples = (4 * 16 * 16) as f64;
        let means = channel_means(&z);
        let vars = channel_variances(&z);
        for (i, (m, v)) in means.iter().zip(&vars).enumerate() {
            let se = (v / n_samples).sqrt();
            assert!(m.abs() <= 4.0 * se, "channel {i}: mean {m}, se {se}");
        }
    }

    #[test]
    fn variance_preserved_with_scaled_activation() {
        // fan_in >= 256 with gain 1: Var(z) within 5% of 1.
        let spec = ConvSpec::new(256, 128, 1, 1, 0);
        let mut rng = RngStream::new(29);
        let sc = StandardizedConv {
            bias: None,
            ..StandardizedConv::scaled_ws(spec, &mut rng, Dtype::Double).unwrap()
        };
        for kind in [ActivationKind::Relu, ActivationKind::Silu] {
            let x = gaussian(Shape::new(8, 8, 8, 256), 0.0, 1.0, &mut rng, Dtype::Double).unwrap();
            let z = ws_conv_output(&sc, &x, kind, true).unwrap();
            let v = avg_channel_variance(&z);
            assert!(rel(v, 1.0) < 0.05, "{kind}: variance {v}");
        }
    }

    #[test]
    fn registry_round_trips() {
        let json = gain_registry_json().unwrap();
        let back = gain_registry_from_json(&json).unwrap();
        assert_eq!(back, gain_registry());
        assert_eq!(back["tanh"].seed, Some(7));
    }
}
