//! Oracle, invariant and gradient suites run by `sola check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    elu_plus_one, kernel_attention, linear_attention, map_rows, softmax_attention, AttentionInputs,
    SimilarityKernel,
};
use crate::backbone::hsb::{equidistant_indices, hidden_state_bridge_grid, HsbParams};
use crate::backbone::{Backbone, BackboneConfig, MergeParams, PatchEmbedParams};
use crate::error::Result;
use crate::grid::TokenGrid;
use crate::numerics::ops::matmul;
use crate::numerics::{grad_check, grad_check_block, grad_check_params, GradCheckOptions, Parameters, Tensor};
use crate::range::{exp_kernel_auto, fit_sqrt_scaling, stack};
use crate::softmax_layer::{conv_mlp_vjp, mhsa_vjp, softmax_layer_vjp, ConvMlpParams, MhsaParams, SoftmaxLayerParams};
use crate::wkv::{
    channel_mix_vjp, spatial_mix_vjp, wkv_layer_vjp, wkv_naive, ChannelMixParams, WkvLayerParams,
    WkvParams,
};

/// Signature shared by the stabilized scan and the fault-injection variant.
pub type ScanFn = fn(&Tensor, &Tensor, &Tensor, &Tensor) -> Result<Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

impl Outcome {
    fn bound(value: f64, limit: f64, what: &str) -> Self {
        Self {
            passed: value.is_finite() && value <= limit,
            value,
            detail: format!("{what} {value:.3e} (limit {limit:.0e})"),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Norm-relative error; non-finite outputs count as infinite error.
pub fn rel_error(got: &Tensor, want: &Tensor) -> f64 {
    if !got.all_finite() || got.shape() != want.shape() {
        return f64::INFINITY;
    }
    let diff = got.sub(want).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    diff / want.norm().max(f64::MIN_POSITIVE)
}

/// Random WKV instance with keys of the given magnitude.
pub fn random_wkv_case(n: usize, d: usize, key_scale: f64, seed: u64) -> [Tensor; 4] {
    let mut r = rng(seed);
    let k = Tensor::from_fn(vec![n, d], |_| r.gen_range(-key_scale..=key_scale));
    let v = Tensor::randn(vec![n, d], 1.0, &mut r);
    let w = Tensor::from_fn(vec![d], |_| r.gen_range(0.05..8.0));
    let u = Tensor::from_fn(vec![d], |_| r.gen_range(-2.0..2.0));
    [k, v, w, u]
}

/// Compares `scan` with the quadratic oracle over random instances.
pub fn check_wkv_scan(scan: ScanFn, instances: usize, key_scale: f64, seed: u64) -> Result<Outcome> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let n = r.gen_range(1..=256);
        let d = r.gen_range(1..=16);
        let scale = if i % 2 == 0 { key_scale } else { 1.0 };
        let [k, v, w, u] = random_wkv_case(n, d, scale, r.gen());
        let want = wkv_naive(&k, &v, &w, &u)?;
        let got = match scan(&k, &v, &w, &u) {
            Ok(t) => t,
            Err(_) => return Ok(Outcome::bound(f64::INFINITY, 1e-8, "scan error")),
        };
        worst = worst.max(rel_error(&got, &want));
        if !worst.is_finite() {
            break;
        }
    }
    Ok(Outcome::bound(worst, 1e-8, "max rel err"))
}

pub fn check_kernel_specialization(seed: u64) -> Result<Outcome> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.gen_range(1..=32);
        let d = r.gen_range(1..=8);
        let inp = AttentionInputs::new(
            Tensor::randn(vec![n, d], 1.0, &mut r),
            Tensor::randn(vec![n, d], 1.0, &mut r),
            Tensor::randn(vec![n, d], 1.0, &mut r),
        )?;
        let a = kernel_attention(&inp, &SimilarityKernel::exp_dot())?;
        let b = softmax_attention(&inp)?;
        worst = worst.max(a.sub(&b)?.max_abs());
    }
    Ok(Outcome::bound(worst, 1e-12, "max abs diff"))
}

pub fn check_associativity(seed: u64) -> Result<Outcome> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.gen_range(1..=64);
        let d = r.gen_range(1..=8);
        let inp = AttentionInputs::new(
            Tensor::randn(vec![n, d], 1.0, &mut r),
            Tensor::randn(vec![n, d], 1.0, &mut r),
            Tensor::randn(vec![n, d], 1.0, &mut r),
        )?;
        let phi = elu_plus_one();
        let (right, _) = linear_attention(&inp, &phi, &phi)?;
        let scores = crate::numerics::ops::matmul_nt(&map_rows(inp.q(), &phi)?, &map_rows(inp.k(), &phi)?)?;
        let left = matmul(&scores, inp.v())?;
        worst = worst.max(left.sub(&right)?.max_abs() / left.max_abs().max(1.0));
    }
    Ok(Outcome::bound(worst, 1e-10, "max scaled diff"))
}

/// With zero bridge projections the bridged model equals the unbridged one bit for bit.
pub fn check_hsb_noop(cfg: &BackboneConfig, resolution: usize, seed: u64) -> Result<Outcome> {
    let mut m = Backbone::build(cfg, seed)?;
    for b in &mut m.bridges {
        b.proj.weight = Tensor::zeros(b.proj.weight.shape().to_vec());
    }
    let img = Tensor::randn(vec![resolution, resolution, 3], 1.0, &mut rng(seed + 1));
    let a = m.forward(&img)?;
    let b = m.without_routes().forward(&img)?;
    let same = a.output.tokens.data() == b.output.tokens.data();
    Ok(Outcome {
        passed: same,
        value: if same { 0.0 } else { 1.0 },
        detail: format!(
            "{} routes silenced, outputs {}",
            cfg.hsb_routes.len(),
            if same { "identical" } else { "differ" }
        ),
    })
}

pub fn check_sampling_rule() -> Result<Outcome> {
    let mut ok = equidistant_indices(16, 4)? == vec![2, 6, 10, 14];
    for n_src in 1..=64 {
        for n_out in 1..=n_src {
            let idx = equidistant_indices(n_src, n_out)?;
            ok &= idx.windows(2).all(|w| w[0] < w[1]) && idx.last().is_some_and(|&l| l < n_src);
        }
    }
    Ok(Outcome {
        passed: ok,
        value: f64::from(u8::from(!ok)),
        detail: "indices unique and increasing for all n_src <= 64".into(),
    })
}

fn perturb<P: Parameters>(p: &mut P, std: f64, seed: u64) -> Result<()> {
    let mut r = rng(seed);
    for t in p.params_mut() {
        let noise = Tensor::randn(t.shape().to_vec(), std, &mut r);
        t.axpy(1.0, &noise)?;
    }
    Ok(())
}

/// Relative gradient errors for every layer type, keyed by layer name.
pub fn layer_gradchecks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let mut r = rng(seed);

    let mut sp = WkvParams::init(6, &mut r);
    perturb(&mut sp, 0.3, seed + 1)?;
    let x = Tensor::randn(vec![5, 6], 1.0, &mut r);
    let probe = Tensor::randn(vec![5, 6], 1.0, &mut r);
    let analytic = (spatial_mix_vjp(&x, &sp)?.pullback)(&probe, None)?;
    let rep = grad_check_block(&x, &sp, |x, p| Ok(spatial_mix_vjp(x, p)?.output), analytic, &probe, &opts)?;
    out.push(("spatial_mix", rep.max_rel_error));

    let mut cp = ChannelMixParams::init(4, 16, &mut r);
    perturb(&mut cp, 0.3, seed + 2)?;
    let x = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let probe = Tensor::randn(vec![3, 4], 1.0, &mut r);
    let analytic = (channel_mix_vjp(&x, &cp)?.1)(&probe)?;
    let rep = grad_check_block(&x, &cp, |x, p| Ok(channel_mix_vjp(x, p)?.0), analytic, &probe, &opts)?;
    out.push(("channel_mix", rep.max_rel_error));

    // Whole WKV layer with a cotangent on its exposed hidden state as well.
    let mut lp = WkvLayerParams::init(4, 4, &mut r);
    perturb(&mut lp, 0.3, seed + 3)?;
    let x = Tensor::randn(vec![6, 4], 1.0, &mut r);
    let probe = Tensor::randn(vec![6, 4], 1.0, &mut r);
    let tap_probe = Tensor::randn(vec![6, 4], 1.0, &mut r);
    let grid = |t: &Tensor| TokenGrid::new(t.clone(), 2, 3);
    let (dx, g) = (wkv_layer_vjp(&grid(&x)?, &lp)?.pullback)(&probe, Some(&tap_probe))?;
    let mut inputs = vec![x.clone()];
    inputs.extend(lp.params().into_iter().map(|(_, t)| t.clone()));
    let mut grads = vec![dx];
    grads.extend(g.params().into_iter().map(|(_, t)| t.clone()));
    let rep = grad_check(
        |xs| {
            let mut q = lp.clone();
            for (d, s) in q.params_mut().into_iter().zip(&xs[1..]) {
                *d = s.clone();
            }
            let o = wkv_layer_vjp(&grid(&xs[0])?, &q)?;
            let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
            Ok(dot(&o.output.tokens, &probe) + dot(&o.hidden, &tap_probe))
        },
        &inputs,
        &grads,
        &opts,
    )?;
    out.push(("wkv_layer", rep.max_rel_error));

    let mut mp = MhsaParams::init(8, 2, &mut r)?;
    perturb(&mut mp, 0.3, seed + 4)?;
    let x = Tensor::randn(vec![4, 8], 1.0, &mut r);
    let probe = Tensor::randn(vec![4, 8], 1.0, &mut r);
    let analytic = (mhsa_vjp(&x, &mp)?.1)(&probe)?;
    let rep = grad_check_block(&x, &mp, |x, p| Ok(mhsa_vjp(x, p)?.0), analytic, &probe, &opts)?;
    out.push(("mhsa", rep.max_rel_error));

    let mut fp = ConvMlpParams::init(4, 2, &mut r)?;
    perturb(&mut fp, 0.3, seed + 5)?;
    let x = Tensor::randn(vec![9, 4], 1.0, &mut r);
    let probe = Tensor::randn(vec![9, 4], 1.0, &mut r);
    let g3 = |t: &Tensor| TokenGrid::new(t.clone(), 3, 3);
    let analytic = (conv_mlp_vjp(&g3(&x)?, &fp)?.1)(&probe)?;
    let rep = grad_check_block(&x, &fp, |x, p| Ok(conv_mlp_vjp(&g3(x)?, p)?.0), analytic, &probe, &opts)?;
    out.push(("conv_mlp", rep.max_rel_error));

    let mut slp = SoftmaxLayerParams::init(4, 2, 2, &mut r)?;
    perturb(&mut slp, 0.3, seed + 6)?;
    let x = Tensor::randn(vec![6, 4], 1.0, &mut r);
    let probe = Tensor::randn(vec![6, 4], 1.0, &mut r);
    let analytic = (softmax_layer_vjp(&grid(&x)?, &slp)?.1)(&probe, None)?;
    let rep = grad_check_block(
        &x,
        &slp,
        |x, p| Ok(softmax_layer_vjp(&grid(x)?, p)?.0.tokens),
        analytic,
        &probe,
        &opts,
    )?;
    out.push(("softmax_layer", rep.max_rel_error));

    let pe = PatchEmbedParams::init(2, 3, 3, &mut r);
    let img = Tensor::randn(vec![4, 6, 3], 1.0, &mut r);
    let probe = Tensor::randn(vec![6, 3], 1.0, &mut r);
    let analytic = (crate::backbone::embed::patch_embed_vjp(&img, &pe)?.1)(&probe)?;
    let rep = grad_check_params(
        &pe,
        |p| {
            let y = crate::backbone::patch_embed(&img, p)?;
            Ok(y.tokens.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        },
        &analytic,
        &opts,
    )?;
    out.push(("patch_embed", rep.max_rel_error));

    let mut mg = MergeParams::init(2, 3, &mut r);
    perturb(&mut mg, 0.3, seed + 7)?;
    let x = Tensor::randn(vec![16, 2], 1.0, &mut r);
    let probe = Tensor::randn(vec![4, 3], 1.0, &mut r);
    let g4 = |t: &Tensor| TokenGrid::new(t.clone(), 4, 4);
    let analytic = (crate::backbone::embed::patch_merge_vjp(&g4(&x)?, &mg)?.1)(&probe)?;
    let rep = grad_check_block(
        &x,
        &mg,
        |x, p| Ok(crate::backbone::embed::patch_merge_vjp(&g4(x)?, p)?.0.tokens),
        analytic,
        &probe,
        &opts,
    )?;
    out.push(("patch_merge", rep.max_rel_error));

    let hp = HsbParams::init(3, 4, &mut r);
    let src = TokenGrid::new(Tensor::randn(vec![16, 3], 1.0, &mut r), 4, 4)?;
    let dst = Tensor::randn(vec![4, 4], 1.0, &mut r);
    let probe = Tensor::randn(vec![4, 4], 1.0, &mut r);
    let g2 = |t: &Tensor| TokenGrid::new(t.clone(), 2, 2);
    let (d_dst, _, g) = (hidden_state_bridge_grid(&src, &g2(&dst)?, &hp)?.pullback)(&probe)?;
    let rep = grad_check_block(
        &dst,
        &hp,
        |x, p| Ok(hidden_state_bridge_grid(&src, &g2(x)?, p)?.fused),
        (d_dst, g),
        &probe,
        &opts,
    )?;
    out.push(("hidden_state_bridge", rep.max_rel_error));
    Ok(out)
}

/// End-to-end check of the backbone gradient on a sampled subset of entries.
pub fn backbone_gradcheck(cfg: &BackboneConfig, resolution: usize, seed: u64, entries: usize) -> Result<f64> {
    let m = Backbone::build(cfg, seed)?;
    let img = Tensor::randn(vec![resolution, resolution, 3], 1.0, &mut rng(seed + 1));
    let dim = *cfg.stage_dims.last().unwrap_or(&0);
    let probe = Tensor::randn(vec![dim], 1.0, &mut rng(seed + 2));
    let (_, pb) = m.forward_vjp(&img)?;
    let g = pb(&probe)?;
    let opts = GradCheckOptions {
        max_entries: Some(entries),
        seed,
        ..Default::default()
    };
    let rep = grad_check_params(
        &m,
        |q| {
            let t = q.forward(&img)?;
            Ok(t.pooled.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        },
        &g,
        &opts,
    )?;
    Ok(rep.max_rel_error)
}

/// Fitted √M exponent and heterogeneous-rate variance agreement.
pub fn check_range_law() -> Result<(Outcome, Outcome)> {
    let fit = fit_sqrt_scaling(&[4, 8, 16, 32, 64], 1.0, 1e-3)?;
    let fit_ok = (0.42..=0.58).contains(&fit.alpha) && fit.r2 >= 0.98;
    let rates = [0.1, 0.07, 0.05];
    let expected: f64 = rates.iter().map(|w| 2.0 / (w * w)).sum();
    let var_err = (stack(&rates)?.variance() - expected).abs() / expected;
    let single = exp_kernel_auto(0.05)?.variance();
    let single_err = (single - 800.0).abs() / 800.0;
    Ok((
        Outcome {
            passed: fit_ok,
            value: fit.alpha,
            detail: format!("alpha {:.4}, R^2 {:.5}", fit.alpha, fit.r2),
        },
        Outcome::bound(var_err.max(single_err), 0.02, "variance rel err"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wkv::wkv_scan;
    use crate::wkv::wkv_scan_unstabilized;

    #[test]
    fn scan_passes_and_injected_fault_is_caught() {
        assert!(check_wkv_scan(wkv_scan, 10, 30.0, 0).unwrap().passed);
        assert!(!check_wkv_scan(wkv_scan_unstabilized, 10, 800.0, 0).unwrap().passed);
    }

    #[test]
    fn small_suites_pass() {
        assert!(check_kernel_specialization(1).unwrap().passed);
        assert!(check_associativity(2).unwrap().passed);
        assert!(check_sampling_rule().unwrap().passed);
        let cfg = BackboneConfig::preset("micro").unwrap();
        assert!(check_hsb_noop(&cfg, 32, 3).unwrap().passed);
    }
}
