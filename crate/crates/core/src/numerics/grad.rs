//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Parameters, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen entries per input tensor.
    pub max_entries: Option<usize>,
    /// Seed for entry subsampling.
    pub seed: u64,
    /// Lower bound on the relative-error denominator. Gradients whose norm
    /// falls below it (e.g. exact invariances) are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
            seed: 0,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max over inputs of `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`,
    /// restricted to the checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub per_input: Vec<f64>,
    pub entries_checked: usize,
}

/// Compares `analytic` gradients of the scalar function `f` at `inputs`
/// with central finite differences.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if inputs.len() != analytic.len() {
        return Err(Error::param(
            "analytic",
            format!("{} gradients for {} inputs", analytic.len(), inputs.len()),
        ));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let v = f(xs)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite)
        }
    };
    eval(inputs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (slot, (x, a)) in inputs.iter().zip(analytic).enumerate() {
        a.expect_same_shape(x, "grad_check")?;
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < x.len() => {
                let mut v = sample(&mut rng, x.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..x.len()).collect(),
        };
        let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
        for &e in &entries {
            let orig = x.data()[e];
            work[slot].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[slot].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[slot].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let an = a.data()[e];
            diff2 += (an - numeric).powi(2);
            an2 += an * an;
            nu2 += numeric * numeric;
            report.max_abs_error = report.max_abs_error.max((an - numeric).abs());
        }
        let rel = diff2.sqrt() / an2.sqrt().max(nu2.sqrt()).max(opts.floor);
        report.per_input.push(rel);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.entries_checked += entries.len();
    }
    Ok(report)
}

/// Checks a block `y = f(x, p)` against analytic `(dx, dp)` for the scalar `⟨probe, y⟩`.
pub fn grad_check_block<P, F>(
    x: &Tensor,
    p: &P,
    forward: F,
    analytic: (Tensor, P),
    probe: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&Tensor, &P) -> Result<Tensor>,
{
    let mut inputs = vec![x.clone()];
    inputs.extend(p.params().into_iter().map(|(_, t)| t.clone()));
    let mut grads = vec![analytic.0];
    grads.extend(analytic.1.params().into_iter().map(|(_, t)| t.clone()));
    grad_check(
        |xs| {
            let mut q = p.clone();
            for (dst, src) in q.params_mut().into_iter().zip(&xs[1..]) {
                *dst = src.clone();
            }
            let y = forward(&xs[0], &q)?;
            y.expect_same_shape(probe, "grad_check_block")?;
            Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        },
        &inputs,
        &grads,
        opts,
    )
}

/// Checks parameter gradients only, for blocks whose input is not differentiated.
pub fn grad_check_params<P, F>(p: &P, forward: F, analytic: &P, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let inputs: Vec<Tensor> = p.params().into_iter().map(|(_, t)| t.clone()).collect();
    let grads: Vec<Tensor> = analytic.params().into_iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |xs| {
            let mut q = p.clone();
            for (dst, src) in q.params_mut().into_iter().zip(xs) {
                *dst = src.clone();
            }
            forward(&q)
        },
        &inputs,
        &grads,
        opts,
    )
}
