//! Central-difference gradient verification.
//!
//! The finite-difference side only evaluates forward losses, so it is an
//! independent oracle for every backward rule. Model-scope checks perturb the
//! plain (untaped) forward, which additionally pins the taped forward to the
//! plain one.

use super::{taped_model_forward, NodeId, Tape};
use crate::blocks::Mode;
use crate::error::{Error, Result};
use crate::models::{model_forward, Model};
use crate::tensor::{Dtype, RngStream, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, scaled by max(1, |theta|) per coordinate.
    pub fd_step: f64,
    pub tolerance: f64,
    /// Cap on coordinates checked per parameter tensor (deterministic,
    /// evenly strided sample); `None` checks everything.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { fd_step: 1e-5, tolerance: 1e-5, max_coords_per_param: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Per-parameter maximum relative error between analytic and
/// central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub entries: Vec<ParamGradError>,
    pub fd_step: f64,
    pub tolerance: f64,
    pub dtype: Dtype,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamGradError> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        (a - b).abs() // both effectively zero: absolute error
    } else {
        (a - b).abs() / denom
    }
}

fn coords_to_check(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let stride = len as f64 / c as f64;
            (0..c).map(|i| ((i as f64 * stride) as usize).min(len - 1)).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Check the gradients of a scalar-valued graph built by `build` over the
/// given named parameters. `build` receives leaf ids in parameter order and
/// must return the loss node.
pub fn grad_check<F>(params: &[(String, Tensor)], cfg: &GradCheckConfig, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    for (name, t) in params {
        if t.dtype() != Dtype::Double {
            return Err(Error::invalid(format!("grad_check requires f64 params ({name})")));
        }
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|(name, t)| tape.leaf(name.clone(), t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let eval = |vals: &[(String, Tensor)]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .map(|(name, t)| tape.leaf(name.clone(), t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).get(0))
    };

    let mut entries = Vec::new();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .wrt(ids[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape(), Dtype::Double));
        let coords = coords_to_check(tensor.len(), cfg.max_coords_per_param);
        let mut max_err = 0.0f64;
        for &ci in &coords {
            let theta = tensor.get(ci);
            let h = cfg.fd_step * theta.abs().max(1.0);
            let mut plus = params.to_vec();
            plus[pi].1.set(ci, theta + h);
            let mut minus = params.to_vec();
            minus[pi].1.set(ci, theta - h);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic.get(ci), fd));
        }
        entries.push(ParamGradError {
            name: name.clone(),
            max_rel_err: max_err,
            coords_checked: coords.len(),
        });
    }
    Ok(GradReport {
        entries,
        fd_step: cfg.fd_step,
        tolerance: cfg.tolerance,
        dtype: Dtype::Double,
    })
}

/// Loss used by model-scope checks.
#[derive(Clone, Debug)]
pub enum CheckLoss {
    /// Sum of all logits.
    SumLogits,
    /// Mean softmax cross-entropy against the given labels.
    CrossEntropy(Vec<usize>),
}

fn plain_loss(model: &Model, x: &Tensor, loss: &CheckLoss) -> Result<f64> {
    let mut rng = RngStream::new(0);
    let (logits, _) = model_forward(model, x, Mode::Eval, &mut rng)?;
    match loss {
        CheckLoss::SumLogits => Ok(logits.to_f64_vec().iter().sum()),
        CheckLoss::CrossEntropy(labels) => {
            let s = logits.shape();
            let mut total = 0.0;
            for n in 0..s.n {
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..s.c {
                    maxv = maxv.max(logits.at(n, 0, 0, c));
                }
                let mut denom = 0.0;
                for c in 0..s.c {
                    denom += (logits.at(n, 0, 0, c) - maxv).exp();
                }
                total -= logits.at(n, 0, 0, labels[n]) - denom.ln() - maxv;
            }
            Ok(total / s.n as f64)
        }
    }
}

/// Gradient-check every parameter of a model: analytic gradients through the
/// tape, finite differences through the plain forward. The model must be
/// built in double precision.
pub fn grad_check_model(
    model: &Model,
    x: &Tensor,
    loss: &CheckLoss,
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    if model.dtype != Dtype::Double {
        return Err(Error::invalid("grad_check_model requires a double-precision model"));
    }

    let mut tape = Tape::new();
    let mut rng = RngStream::new(0);
    let fwd = taped_model_forward(&mut tape, model, x, Mode::Eval, &mut rng)?;
    let loss_node = match loss {
        CheckLoss::SumLogits => tape.sum(fwd.logits),
        CheckLoss::CrossEntropy(labels) => tape.softmax_cross_entropy(fwd.logits, labels)?,
    };
    let grads = tape.backward(loss_node)?;

    let mut names = Vec::new();
    model.visit_params(&mut |name, t| names.push((name, t.len())));
    debug_assert_eq!(names.len(), fwd.params.len());

    let mut entries = Vec::new();
    for (pi, (name, len)) in names.iter().enumerate() {
        debug_assert_eq!(name, &fwd.params[pi].0);
        let id = fwd.params[pi].1;
        let analytic = grads.wrt(id);
        let coords = coords_to_check(*len, cfg.max_coords_per_param);
        let mut max_err = 0.0f64;
        for &ci in &coords {
            let mut m_plus = model.clone();
            let mut m_minus = model.clone();
            let mut theta = 0.0;
            let mut k = 0usize;
            m_plus.visit_params_mut(&mut |_, t| {
                if k == pi {
                    theta = t.get(ci);
                }
                k += 1;
            });
            let h = cfg.fd_step * theta.abs().max(1.0);
            let mut k = 0usize;
            m_plus.visit_params_mut(&mut |_, t| {
                if k == pi {
                    t.set(ci, theta + h);
                }
                k += 1;
            });
            let mut k = 0usize;
            m_minus.visit_params_mut(&mut |_, t| {
                if k == pi {
                    t.set(ci, theta - h);
                }
                k += 1;
            });
            let fd = (plain_loss(&m_plus, x, loss)? - plain_loss(&m_minus, x, loss)?) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.get(ci));
            max_err = max_err.max(rel_err(a, fd));
        }
        entries.push(ParamGradError {
            name: name.clone(),
            max_rel_err: max_err,
            coords_checked: coords.len(),
        });
    }
    Ok(GradReport {
        entries,
        fd_step: cfg.fd_step,
        tolerance: cfg.tolerance,
        dtype: Dtype::Double,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{ActivationKind, ConvSpec};
    use crate::tensor::{gaussian, Shape};

    #[test]
    fn scalar_quadratic() {
        // f(w) = w^2 at w = 3: analytic 6.
        let params = vec![(
            "w".to_string(),
            Tensor::from_f64(Shape::new(1, 1, 1, 1), vec![3.0]),
        )];
        let report = grad_check(&params, &GradCheckConfig::default(), |tape, ids| {
            let sq = tape.scale_by_scalar(ids[0], ids[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err() <= 1e-9, "rel err {}", report.max_rel_err());
    }

    #[test]
    fn ws_conv_relu_chain() {
        // One Scaled-WS conv (fan_in 18) + scaled relu + sum.
        let spec = ConvSpec::new(2, 3, 3, 1, 1);
        assert_eq!(spec.fan_in(), 18);
        let mut rng = RngStream::new(33);
        let sc = crate::ws::StandardizedConv::scaled_ws(spec, &mut rng, Dtype::Double).unwrap();
        // Keep relu inputs away from the kink for clean finite differences.
        let x = gaussian(Shape::new(2, 4, 4, 2), 0.0, 1.0, &mut rng, Dtype::Double)
            .unwrap()
            .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        let params = vec![
            ("w".to_string(), sc.weight.clone()),
            ("gain".to_string(), sc.gain.clone()),
            ("bias".to_string(), sc.bias.clone().unwrap()),
        ];
        let report = grad_check(&params, &GradCheckConfig::default(), |tape, ids| {
            let xi = tape.input(x.clone())?;
            let ws = tape.ws_standardize(ids[0], ids[1], 1e-4)?;
            let y = tape.conv2d(xi, ws, Some(ids[2]), spec)?;
            let a = tape.activation(y, ActivationKind::Relu, true);
            Ok(tape.sum(a))
        })
        .unwrap();
        assert!(report.max_rel_err() <= 1e-6, "rel err {}", report.max_rel_err());
    }
}
