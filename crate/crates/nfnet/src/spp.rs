//! Signal Propagation Plots: per-block activation statistics at
//! initialization, with the ledger prediction alongside, and emitters for
//! CSV, JSON and SVG.
//!
//! A plot is generated by initializing one set of weights, pushing a
//! unit-Gaussian batch through in eval mode, and recording three statistics
//! at every residual block: the average channel squared mean, the average
//! channel variance of the block output, and the average channel variance at
//! the end of the residual branch before the merge. Statistics are reduced in
//! double precision whatever the model dtype.

use crate::error::{Error, Result};
use crate::models::{model_forward_with, Model};
use crate::tensor::{avg_channel_sq_mean, avg_channel_variance, gaussian, Dtype, RngStream, Shape};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SppRecord {
    pub block_index: usize,
    pub stage_index: usize,
    pub is_transition: bool,
    pub avg_sq_mean: f64,
    pub avg_var: f64,
    pub residual_var: f64,
    pub ledger_expected_var: f64,
}

/// Push a unit-Gaussian batch of the given shape through the model at
/// initialization and collect one record per residual block. Deterministic
/// given (model seed, input seed).
pub fn generate_spp(model: &Model, batch: Shape, seed: u64) -> Result<Vec<SppRecord>> {
    let x = gaussian(batch, 0.0, 1.0, &mut RngStream::new(seed), model.dtype)?;
    let mut records = Vec::with_capacity(model.num_blocks());
    let mut rng = RngStream::new(seed ^ 0x5bb1);
    model_forward_with(model, &x, crate::blocks::Mode::Eval, &mut rng, &mut |i, meta, tap| {
        records.push(SppRecord {
            block_index: i,
            stage_index: meta.stage,
            is_transition: meta.is_transition,
            avg_sq_mean: avg_channel_sq_mean(&tap.block_out),
            avg_var: avg_channel_variance(&tap.block_out),
            residual_var: avg_channel_variance(&tap.residual_out),
            ledger_expected_var: meta.expected_var_after,
        });
    })?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SppFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for SppFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(SppFormat::Csv),
            "json" => Ok(SppFormat::Json),
            "svg" => Ok(SppFormat::Svg),
            other => Err(Error::invalid(format!("unknown format `{other}`"))),
        }
    }
}

pub fn to_csv(records: &[SppRecord]) -> String {
    let mut out = String::from(
        "block_index,stage_index,is_transition,avg_sq_mean,avg_var,residual_var,ledger_expected_var\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.block_index,
            r.stage_index,
            r.is_transition,
            r.avg_sq_mean,
            r.avg_var,
            r.residual_var,
            r.ledger_expected_var
        ));
    }
    out
}

pub fn to_json(records: &[SppRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn from_json(s: &str) -> Result<Vec<SppRecord>> {
    Ok(serde_json::from_str(s)?)
}

/// Three stacked panels (squared mean, variance + ledger, residual variance)
/// against block index, with transition blocks marked by filled dots.
pub fn to_svg(records: &[SppRecord]) -> String {
    const W: f64 = 900.0;
    const PANEL_H: f64 = 220.0;
    const MARGIN: f64 = 52.0;
    let panels: [(&str, Box<dyn Fn(&SppRecord) -> f64>); 3] = [
        ("avg_sq_mean", Box::new(|r: &SppRecord| r.avg_sq_mean)),
        ("avg_var", Box::new(|r: &SppRecord| r.avg_var)),
        ("residual_var", Box::new(|r: &SppRecord| r.residual_var)),
    ];
    let total_h = PANEL_H * 3.0 + MARGIN;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{total_h}\" \
         viewBox=\"0 0 {W} {total_h}\">\n<style>text{{font:12px monospace}}</style>\n"
    );
    let n = records.len().max(2);
    let x_of = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;

    for (p, (name, get)) in panels.iter().enumerate() {
        let top = p as f64 * PANEL_H + 18.0;
        let bottom = top + PANEL_H - 44.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in records {
            let v = get(r);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if *name == "avg_var" {
            for r in records {
                lo = lo.min(r.ledger_expected_var);
                hi = hi.max(r.ledger_expected_var);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if (hi - lo).abs() < 1e-12 {
            hi = lo + 1.0;
        }
        let y_of = |v: f64| bottom - (bottom - top) * (v - lo) / (hi - lo);

        svg.push_str(&format!("<g id=\"panel_{name}\">\n"));
        svg.push_str(&format!(
            "<text x=\"{MARGIN}\" y=\"{}\">{name}</text>\n",
            top - 4.0
        ));
        svg.push_str(&format!(
            "<rect x=\"{MARGIN}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
            W - 2.0 * MARGIN,
            bottom - top
        ));
        let line = |vals: Vec<f64>, color: &str, dash: &str| -> String {
            let pts: Vec<String> = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
                .collect();
            format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"{dash}/>\n",
                pts.join(" ")
            )
        };
        svg.push_str(&line(records.iter().map(|r| get(r)).collect(), "#0077bb", ""));
        if *name == "avg_var" {
            svg.push_str(&line(
                records.iter().map(|r| r.ledger_expected_var).collect(),
                "#cc3311",
                " stroke-dasharray=\"4 3\"",
            ));
        }
        for (i, r) in records.iter().enumerate() {
            if r.is_transition {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#000\"/>\n",
                    x_of(i),
                    y_of(get(r))
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">block_index</text>\n",
            W / 2.0 - 36.0,
            bottom + 16.0
        ));
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write records to `path` in the chosen format.
pub fn emit(records: &[SppRecord], format: SppFormat, path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no records to emit"));
    }
    let body = match format {
        SppFormat::Csv => to_csv(records),
        SppFormat::Json => to_json(records)?,
        SppFormat::Svg => to_svg(records),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(body.as_bytes()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage growth analysis
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct StageGrowth {
    pub stage_index: usize,
    pub n_blocks: usize,
    /// Least-squares slope of avg_var against the within-stage block index.
    pub slope: f64,
    pub intercept: f64,
    pub mean_residual_var: f64,
    pub max_rel_ledger_err: f64,
    /// Slope off by more than 25% from alpha^2 (the NF growth rate).
    pub deviates_from_alpha_sq: bool,
    /// Slope off by more than 25% from the stage's mean residual variance
    /// (the reference-model growth rate).
    pub deviates_from_residual_var: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthReport {
    pub stages: Vec<StageGrowth>,
    /// (stage_index, reason) for stages too short to fit.
    pub skipped: Vec<(usize, String)>,
}

impl GrowthReport {
    pub fn max_rel_ledger_err(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| s.max_rel_ledger_err)
            .fold(0.0, f64::max)
    }
}

/// Per-stage least-squares fit of avg_var growth. Stages with fewer than
/// three blocks are skipped with a note.
pub fn fit_stage_growth(records: &[SppRecord], alpha: f64) -> GrowthReport {
    let mut stages = Vec::new();
    let mut skipped = Vec::new();
    let max_stage = records.iter().map(|r| r.stage_index).max().unwrap_or(0);
    for s in 0..=max_stage {
        let rs: Vec<&SppRecord> = records.iter().filter(|r| r.stage_index == s).collect();
        if rs.len() < 3 {
            skipped.push((s, format!("{} block(s), need 3 for a slope", rs.len())));
            continue;
        }
        let n = rs.len() as f64;
        let xs: Vec<f64> = (0..rs.len()).map(|i| i as f64).collect();
        let ys: Vec<f64> = rs.iter().map(|r| r.avg_var).collect();
        let mean_x = xs.iter().sum::<f64>() / n;
        let mean_y = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
        let slope = sxy / sxx;
        let intercept = mean_y - slope * mean_x;
        let mean_residual = rs.iter().map(|r| r.residual_var).sum::<f64>() / n;
        let ledger_err = rs
            .iter()
            .map(|r| (r.avg_var - r.ledger_expected_var).abs() / r.ledger_expected_var.abs().max(1e-12))
            .fold(0.0, f64::max);
        let alpha_sq = alpha * alpha;
        stages.push(StageGrowth {
            stage_index: s,
            n_blocks: rs.len(),
            slope,
            intercept,
            mean_residual_var: mean_residual,
            max_rel_ledger_err: ledger_err,
            deviates_from_alpha_sq: (slope - alpha_sq).abs() > 0.25 * alpha_sq.abs().max(1e-12),
            deviates_from_residual_var: (slope - mean_residual).abs()
                > 0.25 * mean_residual.abs().max(1e-12),
        });
    }
    GrowthReport { stages, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BnOrdering;
    use crate::models::{build_bn_resnet, build_nf_resnet, ResNetConfig};

    fn small_nf(skipinit: f64, use_ws: bool) -> Model {
        let cfg = ResNetConfig {
            stage_widths: vec![32, 32],
            stage_depths: vec![4, 4],
            alpha: 0.2,
            use_scaled_ws: use_ws,
            skipinit_gain_init: skipinit,
            dtype: Dtype::Double,
            ..ResNetConfig::default()
        };
        build_nf_resnet(&cfg, 11).unwrap()
    }

    #[test]
    fn identity_stack_has_constant_variance() {
        let m = small_nf(0.0, true);
        let recs = generate_spp(&m, Shape::new(8, 32, 32, 3), 5).unwrap();
        assert_eq!(recs.len(), 8);
        // With zero gains the non-transition blocks pass the signal through;
        // avg_var changes only at the transition.
        for pair in recs.windows(2) {
            if !pair[1].is_transition {
                assert!((pair[1].avg_var - pair[0].avg_var).abs() < 1e-12);
            }
        }
        let report = fit_stage_growth(&recs, 0.2);
        // Identity propagation: slope indistinguishable from zero.
        for s in &report.stages {
            assert!(s.slope.abs() < 1e-9, "stage {} slope {}", s.stage_index, s.slope);
        }
    }

    #[test]
    fn ws_model_keeps_squared_means_small() {
        let mut m = small_nf(1.0, true);
        m.set_skipinit_gains(1.0);
        let recs = generate_spp(&m, Shape::new(8, 32, 32, 3), 6).unwrap();
        for r in &recs {
            assert!(
                r.avg_sq_mean <= 0.05 * r.avg_var,
                "block {}: sq_mean {} vs var {}",
                r.block_index,
                r.avg_sq_mean,
                r.avg_var
            );
        }
    }

    #[test]
    fn bn_model_resets_at_stage_start() {
        let cfg = ResNetConfig {
            stage_widths: vec![128, 128],
            stage_depths: vec![3, 3],
            dtype: Dtype::Double,
            ..ResNetConfig::default()
        };
        for ordering in [BnOrdering::BnReluConv, BnOrdering::ReluBnConv] {
            let m = build_bn_resnet(&cfg, ordering, 4).unwrap();
            let recs = generate_spp(&m, Shape::new(16, 32, 32, 3), 9).unwrap();
            let trans = recs.iter().find(|r| r.is_transition).unwrap();
            let before = &recs[trans.block_index - 1];
            // Reset: variance drops to roughly shortcut + branch, i.e. about
            // twice the branch constant.
            assert!(trans.avg_var < before.avg_var);
            let reset_to = 2.0 * ordering.branch_variance();
            assert!(
                (trans.avg_var - reset_to).abs() / reset_to < 0.2,
                "{ordering}: reset var {} vs {}",
                trans.avg_var,
                reset_to
            );
            // Growth per block tracks the branch variance.
            let report = fit_stage_growth(&recs, cfg.alpha);
            for s in &report.stages {
                assert!(
                    !s.deviates_from_residual_var,
                    "{ordering} stage {}: slope {} vs residual {}",
                    s.stage_index,
                    s.slope,
                    s.mean_residual_var
                );
            }
        }
    }

    #[test]
    fn spp_is_deterministic() {
        let m = small_nf(0.0, true);
        let a = generate_spp(&m, Shape::new(4, 16, 16, 3), 3).unwrap();
        let b = generate_spp(&m, Shape::new(4, 16, 16, 3), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_json_svg_emission() {
        let rec = SppRecord {
            block_index: 0,
            stage_index: 0,
            is_transition: true,
            avg_sq_mean: 0.001,
            avg_var: 1.04,
            residual_var: 0.99,
            ledger_expected_var: 1.04,
        };
        let csv = to_csv(&[rec]);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with(
            "block_index,stage_index,is_transition,avg_sq_mean,avg_var,residual_var,ledger_expected_var\n"
        ));
        assert!(csv.ends_with('\n'));

        let json = to_json(&[rec]).unwrap();
        let back = from_json(&json).unwrap();
        assert_eq!(back, vec![rec]);

        let svg = to_svg(&[rec, SppRecord { block_index: 1, is_transition: false, ..rec }]);
        for panel in ["panel_avg_sq_mean", "panel_avg_var", "panel_residual_var"] {
            assert!(svg.contains(panel), "missing {panel}");
        }
        assert!(svg.contains("block_index"));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spp.csv");
        emit(&[rec], SppFormat::Csv, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), csv);
    }

    #[test]
    fn growth_fit_flags_and_skips() {
        // Synthetic records: stage 0 grows at exactly alpha^2 = 0.04, stage 1
        // has two blocks and is skipped.
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(SppRecord {
                block_index: i,
                stage_index: 0,
                is_transition: i == 0,
                avg_sq_mean: 0.0,
                avg_var: 1.0 + 0.04 * i as f64,
                residual_var: 0.04,
                ledger_expected_var: 1.0 + 0.04 * i as f64,
            });
        }
        for i in 5..7 {
            records.push(SppRecord {
                block_index: i,
                stage_index: 1,
                is_transition: i == 5,
                avg_sq_mean: 0.0,
                avg_var: 1.0,
                residual_var: 1.0,
                ledger_expected_var: 1.0,
            });
        }
        let report = fit_stage_growth(&records, 0.2);
        assert_eq!(report.stages.len(), 1);
        assert_eq!(report.skipped.len(), 1);
        let s = &report.stages[0];
        assert!((s.slope - 0.04).abs() < 1e-12);
        assert!(!s.deviates_from_alpha_sq);
        assert!(s.max_rel_ledger_err < 1e-12);
    }
}
