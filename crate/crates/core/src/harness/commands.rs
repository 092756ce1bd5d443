use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::backbone::counts::{flop_curve, growth_exponent};
use crate::backbone::{count_params, Backbone, BackboneConfig, CurvePoint, LayerKind};
use crate::error::{Error, Result};
use crate::harness::checks::{self, ScanFn};
use crate::harness::report::RunReport;
use crate::harness::toy::{train_toy, TrainOptions};
use crate::numerics::Tensor;
use crate::range::{fit_sqrt_scaling, range_table, write_range_csv};
use crate::wkv::{wkv_scan, wkv_scan_unstabilized};

/// One seeded forward pass on a random image.
pub fn cmd_forward(cfg: &BackboneConfig, resolution: usize, seed: u64) -> Result<RunReport> {
    let mut report = RunReport::start("forward").with_config(cfg)?;
    let model = Backbone::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let image = Tensor::randn(vec![resolution, resolution, 3], 1.0, &mut rng);
    let trace = model.forward(&image)?;
    report.metric("params", model.count_params() as f64);
    report.metric("flops", trace.total_flops() as f64);
    report.metric("resolution", resolution as f64);
    report.data = serde_json::to_value(trace.report())?;
    Ok(report.finish())
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    /// Swap the stabilized scan for the unstabilized one.
    pub inject_fault: bool,
}

/// Runs every oracle, invariant and gradient suite.
pub fn cmd_check(cfg: &BackboneConfig, opts: &CheckOptions) -> Result<RunReport> {
    let mut report = RunReport::start("check").with_config(cfg)?;
    let seed = opts.seed;
    let scan: ScanFn = if opts.inject_fault {
        wkv_scan_unstabilized
    } else {
        wkv_scan
    };

    let o = checks::check_wkv_scan(scan, 100, 30.0, seed)?;
    report.metric("wkv_scan_rel_err", o.value);
    report.check("wkv_scan_vs_naive", o.passed, o.detail)?;

    let o = checks::check_wkv_scan(scan, 20, 800.0, seed + 1)?;
    report.metric("wkv_overflow_rel_err", o.value);
    report.check("wkv_scan_overflow_keys", o.passed, o.detail)?;

    if !opts.inject_fault {
        // The harness must notice a scan without max subtraction.
        let o = checks::check_wkv_scan(wkv_scan_unstabilized, 20, 800.0, seed + 1)?;
        report.check(
            "wkv_fault_detected",
            !o.passed,
            format!("unstabilized scan: {}", o.detail),
        )?;
    }

    let o = checks::check_kernel_specialization(seed + 2)?;
    report.metric("kernel_specialization_err", o.value);
    report.check("kernel_attention_specialization", o.passed, o.detail)?;

    let o = checks::check_associativity(seed + 3)?;
    report.metric("associativity_err", o.value);
    report.check("linear_attention_associativity", o.passed, o.detail)?;

    let o = checks::check_sampling_rule()?;
    report.check("equidistant_sampling", o.passed, o.detail)?;

    let o = checks::check_hsb_noop(cfg, 32, seed + 4)?;
    report.check("hsb_noop_equivalence", o.passed, o.detail)?;

    let mut worst: f64 = 0.0;
    for (name, err) in checks::layer_gradchecks(seed + 5)? {
        report.metric(&format!("gradcheck_{name}"), err);
        worst = worst.max(err);
    }
    report.check(
        "layer_gradchecks",
        worst <= 1e-4,
        format!("max rel err {worst:.3e} (limit 1e-4)"),
    )?;

    let micro = BackboneConfig::preset("micro")?;
    let e2e = checks::backbone_gradcheck(&micro, 32, seed + 6, 4)?;
    report.metric("gradcheck_micro_backbone", e2e);
    report.check(
        "micro_backbone_gradcheck",
        e2e <= 1e-3,
        format!("max rel err {e2e:.3e} (limit 1e-3)"),
    )?;

    let (fit, var) = checks::check_range_law()?;
    report.metric("range_alpha", fit.value);
    report.check("range_sqrt_law", fit.passed, fit.detail)?;
    report.check("range_variance_sum", var.passed, var.detail)?;
    Ok(report.finish())
}

pub fn write_curve_csv<W: std::io::Write>(rows: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "resolution", "tokens", "flops"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.resolution.to_string(),
            r.tokens.to_string(),
            r.flops.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// FLOP curves for the config and its all-softmax variant, with fitted growth exponents.
pub fn cmd_bench(cfg: &BackboneConfig, resolutions: &[usize], out: Option<&Path>) -> Result<RunReport> {
    let mut report = RunReport::start("bench").with_config(cfg)?;
    if resolutions.len() < 2 {
        return Err(Error::param("resolutions", "need at least two resolutions"));
    }
    let base = flop_curve(cfg, resolutions)?;
    let full = flop_curve(&cfg.uniform_variant(LayerKind::Softmax), resolutions)?;
    let linear = flop_curve(&cfg.uniform_variant(LayerKind::Linear), resolutions)?;
    report.metric("params", count_params(cfg)? as f64);
    report.metric("exponent", growth_exponent(&base)?);
    report.metric("exponent_all_softmax", growth_exponent(&full)?);
    report.metric("exponent_all_linear", growth_exponent(&linear)?);
    let rows: Vec<CurvePoint> = base.into_iter().chain(full).collect();
    if let Some(path) = out {
        write_curve_csv(&rows, std::fs::File::create(path)?)?;
    }
    report.data = serde_json::to_value(&rows)?;
    Ok(report.finish())
}

/// Depths used for the power-law fit: 4, 8, 16, … up to `max_depth`.
pub fn fit_depths(max_depth: usize) -> Vec<usize> {
    std::iter::successors(Some(4usize), |m| Some(m * 2))
        .take_while(|&m| m <= max_depth)
        .collect()
}

/// Interaction-range table for depths `1..=max_depth` and the `√M` fit.
pub fn cmd_range(w: f64, epsilon: f64, max_depth: usize, out: Option<&Path>) -> Result<RunReport> {
    let mut report = RunReport::start("range");
    let depths = fit_depths(max_depth);
    if depths.len() < 4 {
        return Err(Error::param(
            "max-depth",
            format!("need at least 32 for a four-point fit, got {max_depth}"),
        ));
    }
    let all: Vec<usize> = (1..=max_depth).collect();
    let rows = range_table(&all, w, epsilon)?;
    let fit = fit_sqrt_scaling(&depths, w, epsilon)?;
    report.metric("alpha", fit.alpha);
    report.metric("c", fit.c);
    report.metric("r2", fit.r2);
    report.metric("xi_depth1", rows[0].xi as f64);
    if let Some(path) = out {
        write_range_csv(&rows, std::fs::File::create(path)?)?;
    }
    report.data = json!({ "fit": fit, "rows": rows });
    Ok(report.finish())
}

/// Toy classification run with plain gradient descent.
pub fn cmd_train_toy(cfg: &BackboneConfig, opts: &TrainOptions) -> Result<RunReport> {
    let mut report = RunReport::start("train-toy").with_config(cfg)?;
    let result = train_toy(cfg, opts)?;
    report.metric("params", result.params as f64);
    report.metric("initial_loss", result.initial_loss());
    report.metric("final_loss", result.final_loss());
    report.metric("final_accuracy", result.final_accuracy);
    report.metric("steps", opts.steps as f64);
    report.metric("lr", opts.lr);
    report.data = serde_json::to_value(&result)?;
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_report_is_deterministic() {
        let cfg = BackboneConfig::preset("micro").unwrap();
        let a = cmd_forward(&cfg, 32, 7).unwrap();
        let b = cmd_forward(&cfg, 32, 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(cmd_forward(&cfg, 30, 7), Err(Error::Resolution { .. })));
    }

    #[test]
    fn bench_rows_and_exponents() {
        let cfg = BackboneConfig::preset("sola_t").unwrap();
        let r = cmd_bench(&cfg, &[224, 448, 896], None).unwrap();
        assert_eq!(r.data.as_array().unwrap().len(), 6);
        assert!(r.metrics["exponent"] <= 1.25);
        assert!(r.metrics["exponent_all_softmax"] >= 1.5);
        assert!(cmd_bench(&cfg, &[224, 226], None).is_err());
    }

    #[test]
    fn range_report() {
        let r = cmd_range(1.0, 1e-3, 64, None).unwrap();
        assert!((0.42..=0.58).contains(&r.metrics["alpha"]));
        assert_eq!(r.metrics["xi_depth1"], (1e3f64).ln().ceil());
        assert!(cmd_range(1.0, 1e-3, 16, None).is_err());
        assert_eq!(fit_depths(64), vec![4, 8, 16, 32, 64]);
    }

    #[test]
    fn full_check_suite_passes_and_fault_fails() {
        let cfg = BackboneConfig::preset("micro").unwrap();
        let ok = cmd_check(&cfg, &CheckOptions { seed: 0, inject_fault: false }).unwrap();
        assert!(ok.passed(), "{}", ok.summary());
        let bad = cmd_check(&cfg, &CheckOptions { seed: 0, inject_fault: true }).unwrap();
        let names: Vec<&str> = bad.failures().iter().map(|c| c.name.as_str()).collect();
        assert!(names.contains(&"wkv_scan_overflow_keys"), "{names:?}");
    }
}
