//! Reference token mixers: softmax attention, normalized kernel attention,
//! decomposable (linear) attention with its hidden state, and the
//! distance-decayed state together with its effective interaction range.
//!
//! Nothing here is scaled by `1/√d`; these are the unscaled textbook forms.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::ops::{matmul, matmul_nt, matmul_tn, softmax_rows};
use crate::numerics::Tensor;

/// Query, key and value matrices of equal shape `N × d`.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    q: Tensor,
    k: Tensor,
    v: Tensor,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        if q.shape().len() != 2 || q.rows() == 0 {
            return Err(Error::shape("attention inputs", q.shape(), &[1, 0]));
        }
        if k.rows() != q.rows() || k.shape().len() != 2 {
            return Err(Error::shape("attention inputs", q.shape(), k.shape()));
        }
        if v.rows() != q.rows() || v.shape().len() != 2 {
            return Err(Error::shape("attention inputs", q.shape(), v.shape()));
        }
        if k.cols() != q.cols() {
            return Err(Error::shape("attention inputs", q.shape(), k.shape()));
        }
        Ok(Self { q, k, v })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k(&self) -> &Tensor {
        &self.k
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn tokens(&self) -> usize {
        self.q.rows()
    }
}

/// Row map `R^d → R^m` with nonnegative outputs.
pub type FeatureMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `elu(x) + 1`, strictly positive and smooth.
pub fn elu_plus_one() -> FeatureMap {
    Arc::new(|x| {
        x.iter()
            .map(|&v| if v > 0.0 { v + 1.0 } else { v.exp() })
            .collect()
    })
}

/// Applies a feature map to every row.
pub fn map_rows(x: &Tensor, phi: &FeatureMap) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| phi(x.row(i))).collect();
    Tensor::from_rows(&rows)
}

/// Nonnegative similarity `κ(q, k)`, optionally backed by feature maps.
#[derive(Clone)]
pub struct SimilarityKernel {
    evaluate: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    features: Option<(FeatureMap, FeatureMap)>,
}

impl SimilarityKernel {
    pub fn new(evaluate: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            evaluate: Arc::new(evaluate),
            features: None,
        }
    }

    /// `exp(q·kᵀ)`, which turns kernel attention into softmax attention.
    pub fn exp_dot() -> Self {
        Self::new(|q, k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>().exp())
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c)
    }

    /// Decomposable kernel `φ_q(q)·φ_k(k)ᵀ`.
    pub fn decomposable(phi_q: FeatureMap, phi_k: FeatureMap) -> Self {
        let (fq, fk) = (phi_q.clone(), phi_k.clone());
        Self {
            evaluate: Arc::new(move |q, k| fq(q).iter().zip(fk(k)).map(|(a, b)| a * b).sum()),
            features: Some((phi_q, phi_k)),
        }
    }

    pub fn evaluate(&self, q: &[f64], k: &[f64]) -> f64 {
        (self.evaluate)(q, k)
    }

    pub fn feature_maps(&self) -> Option<&(FeatureMap, FeatureMap)> {
        self.features.as_ref()
    }
}

impl std::fmt::Debug for SimilarityKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimilarityKernel")
            .field("decomposable", &self.features.is_some())
            .finish()
    }
}

/// Accumulated `φ(K)ᵀ V`, shape `m × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub matrix: Tensor,
}

/// `softmax(Q Kᵀ) V`, row-wise softmax, no scaling.
pub fn softmax_attention(inp: &AttentionInputs) -> Result<Tensor> {
    let scores = matmul_nt(inp.q(), inp.k())?;
    matmul(&softmax_rows(&scores), inp.v())
}

/// Normalized kernel-weighted mean of the value rows, per query.
pub fn kernel_attention(inp: &AttentionInputs, kernel: &SimilarityKernel) -> Result<Tensor> {
    let (n, d) = (inp.tokens(), inp.v().cols());
    let mut out = Tensor::zeros(vec![n, d]);
    for t in 0..n {
        let q = inp.q().row(t);
        let mut den = 0.0;
        let row = out.row_mut(t);
        for i in 0..n {
            let w = kernel.evaluate(q, inp.k().row(i));
            den += w;
            for (o, &vv) in row.iter_mut().zip(inp.v().row(i)) {
                *o += w * vv;
            }
        }
        if den <= 0.0 || !den.is_finite() {
            return Err(Error::DegenerateKernel { t });
        }
        row.iter_mut().for_each(|o| *o /= den);
    }
    Ok(out)
}

/// Unnormalized linear attention `φ(Q)·(φ(K)ᵀ V)`; never forms the `N × N` matrix.
pub fn linear_attention(
    inp: &AttentionInputs,
    phi_q: &FeatureMap,
    phi_k: &FeatureMap,
) -> Result<(Tensor, HiddenState)> {
    let fq = map_rows(inp.q(), phi_q)?;
    let fk = map_rows(inp.k(), phi_k)?;
    let h = matmul_tn(&fk, inp.v())?;
    let out = matmul(&fq, &h)?;
    Ok((out, HiddenState { matrix: h }))
}

/// Linear attention divided per token by `φ(q_t)·(φ(K)ᵀ 𝟙)`.
pub fn linear_attention_normalized(
    inp: &AttentionInputs,
    phi_q: &FeatureMap,
    phi_k: &FeatureMap,
) -> Result<(Tensor, HiddenState)> {
    let fq = map_rows(inp.q(), phi_q)?;
    let fk = map_rows(inp.k(), phi_k)?;
    let h = matmul_tn(&fk, inp.v())?;
    let z = fk.sum_rows();
    let mut out = matmul(&fq, &h)?;
    for t in 0..out.rows() {
        let den: f64 = fq.row(t).iter().zip(z.data()).map(|(a, b)| a * b).sum();
        if den <= 0.0 || !den.is_finite() {
            return Err(Error::DegenerateKernel { t });
        }
        out.row_mut(t).iter_mut().for_each(|o| *o /= den);
    }
    Ok((out, HiddenState { matrix: h }))
}

/// `H_t = Σ_{i≠t} decay(|t−i|) φ(k_i)ᵀ v_i + φ(k_t)ᵀ v_t` by direct summation.
///
/// `t` is 1-based.
pub fn decayed_state(
    keys: &Tensor,
    values: &Tensor,
    phi_k: &FeatureMap,
    decay: &dyn Fn(usize) -> f64,
    t: usize,
) -> Result<HiddenState> {
    let n = keys.rows();
    if values.rows() != n {
        return Err(Error::shape("decayed_state", keys.shape(), values.shape()));
    }
    if t == 0 || t > n {
        return Err(Error::Index { index: t, len: n });
    }
    let fk = map_rows(keys, phi_k)?;
    let (m, d) = (fk.cols(), values.cols());
    let mut h = Tensor::zeros(vec![m, d]);
    for i in 0..n {
        let dist = (t - 1).abs_diff(i);
        let weight = if dist == 0 { 1.0 } else { decay(dist) };
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::param("decay", format!("decay({dist}) = {weight} outside (0, 1]")));
        }
        for a in 0..m {
            let s = weight * fk.at(i, a);
            for (o, &vv) in h.row_mut(a).iter_mut().zip(values.row(i)) {
                *o += s * vv;
            }
        }
    }
    Ok(HiddenState { matrix: h })
}

/// Distance `ξ = ln(1/ε)/w` at which `e^{−wΔ}` falls to `ε`.
pub fn effective_range(w: f64, epsilon: f64) -> Result<f64> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::param("w", format!("decay rate must be positive, got {w}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::param("epsilon", format!("must lie in (0, 1), got {epsilon}")));
    }
    Ok((1.0 / epsilon).ln() / w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(n: usize, d: usize, seed: u64) -> AttentionInputs {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        AttentionInputs::new(
            Tensor::randn(vec![n, d], 1.0, &mut r),
            Tensor::randn(vec![n, d], 1.0, &mut r),
            Tensor::randn(vec![n, d], 1.0, &mut r),
        )
        .unwrap()
    }

    /// Literal per-token ratio of exponential sums.
    fn softmax_oracle(inp: &AttentionInputs) -> Tensor {
        let (n, d) = (inp.tokens(), inp.v().cols());
        let mut out = Tensor::zeros(vec![n, d]);
        for t in 0..n {
            for j in 0..d {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..n {
                    let s: f64 = (0..inp.q().cols()).map(|c| inp.q().at(t, c) * inp.k().at(i, c)).sum();
                    num += s.exp() * inp.v().at(i, j);
                    den += s.exp();
                }
                out.data_mut()[t * d + j] = num / den;
            }
        }
        out
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().max_abs()
    }

    #[test]
    fn single_token_returns_value() {
        let inp = random_inputs(1, 3, 1);
        assert!(max_diff(&softmax_attention(&inp).unwrap(), inp.v()) < 1e-15);
    }

    #[test]
    fn identical_keys_give_column_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let krow = Tensor::randn(vec![1, 3], 1.0, &mut r);
        let k = Tensor::from_fn(vec![5, 3], |i| krow.data()[i % 3]);
        let inp = AttentionInputs::new(
            Tensor::randn(vec![5, 3], 1.0, &mut r),
            k,
            Tensor::randn(vec![5, 3], 1.0, &mut r),
        )
        .unwrap();
        let out = softmax_attention(&inp).unwrap();
        let mean = inp.v().mean_rows();
        for t in 0..5 {
            for j in 0..3 {
                assert!((out.at(t, j) - mean.data()[j]).abs() < 1e-12);
            }
        }
        let uniform = kernel_attention(&inp, &SimilarityKernel::constant(1.0)).unwrap();
        for t in 0..5 {
            for j in 0..3 {
                assert!((uniform.at(t, j) - mean.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_matches_literal_oracle() {
        let inp = random_inputs(8, 4, 3);
        assert!(max_diff(&softmax_attention(&inp).unwrap(), &softmax_oracle(&inp)) <= 1e-12);
    }

    #[test]
    fn kernel_attention_with_exp_is_softmax() {
        let inp = random_inputs(8, 4, 4);
        let a = kernel_attention(&inp, &SimilarityKernel::exp_dot()).unwrap();
        assert!(max_diff(&a, &softmax_attention(&inp).unwrap()) <= 1e-12);
    }

    #[test]
    fn kernel_attention_reports_degenerate_token() {
        let inp = random_inputs(3, 2, 5);
        let err = kernel_attention(&inp, &SimilarityKernel::constant(0.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateKernel { t: 0 }));
    }

    #[test]
    fn decomposable_kernel_agrees_with_normalized_linear_attention() {
        let inp = random_inputs(6, 3, 6);
        let phi = elu_plus_one();
        let kernel = SimilarityKernel::decomposable(phi.clone(), phi.clone());
        let a = kernel_attention(&inp, &kernel).unwrap();
        let (b, _) = linear_attention_normalized(&inp, &phi, &phi).unwrap();
        assert!(max_diff(&a, &b) <= 1e-10);
    }

    #[test]
    fn feature_maps_reproduce_kernel_on_probes() {
        let phi = elu_plus_one();
        let kernel = SimilarityKernel::decomposable(phi.clone(), phi.clone());
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let k: Vec<f64> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
            let (fq, fk) = kernel.feature_maps().unwrap();
            let direct: f64 = fq(&q).iter().zip(fk(&k)).map(|(a, b)| a * b).sum();
            assert!(kernel.evaluate(&q, &k) >= 0.0);
            assert!((kernel.evaluate(&q, &k) - direct).abs() <= 1e-10);
        }
    }

    #[test]
    fn linear_attention_single_token() {
        let inp = random_inputs(1, 3, 8);
        let phi = elu_plus_one();
        let (out, h) = linear_attention(&inp, &phi, &phi).unwrap();
        let s: f64 = phi(inp.q().row(0)).iter().zip(phi(inp.k().row(0))).map(|(a, b)| a * b).sum();
        assert!(max_diff(&out, &inp.v().scale(s)) <= 1e-12);
        assert_eq!(h.matrix.shape(), &[3, 3]);
    }

    #[test]
    fn linear_attention_groupings_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let inp = AttentionInputs::new(
            Tensor::randn(vec![16, 8], 1.0, &mut r),
            Tensor::randn(vec![16, 8], 1.0, &mut r),
            Tensor::randn(vec![16, 8], 1.0, &mut r),
        )
        .unwrap();
        let phi = elu_plus_one();
        let (right, _) = linear_attention(&inp, &phi, &phi).unwrap();
        // Left grouping: materialize the N×N score matrix, then multiply by V.
        let fq = map_rows(inp.q(), &phi).unwrap();
        let fk = map_rows(inp.k(), &phi).unwrap();
        let mut left = Tensor::zeros(vec![16, 8]);
        for t in 0..16 {
            for i in 0..16 {
                let s: f64 = fq.row(t).iter().zip(fk.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..8 {
                    left.data_mut()[t * 8 + j] += s * inp.v().at(i, j);
                }
            }
        }
        assert!(max_diff(&left, &right) <= 1e-10);
    }

    #[test]
    fn undecayed_state_is_global_hidden_state() {
        let inp = random_inputs(7, 3, 10);
        let phi = elu_plus_one();
        let (_, h) = linear_attention(&inp, &phi, &phi).unwrap();
        for t in 1..=7 {
            let ht = decayed_state(inp.k(), inp.v(), &phi, &|_| 1.0, t).unwrap();
            assert!(max_diff(&ht.matrix, &h.matrix) <= 1e-12);
        }
    }

    #[test]
    fn strong_decay_keeps_only_the_diagonal() {
        let inp = random_inputs(8, 3, 11);
        let phi = elu_plus_one();
        let fk = map_rows(inp.k(), &phi).unwrap();
        for t in 1..=8 {
            let ht = decayed_state(inp.k(), inp.v(), &phi, &|d| (-50.0 * d as f64).exp(), t).unwrap();
            let own = matmul_tn(
                &fk.gather_rows(&[t - 1]),
                &inp.v().gather_rows(&[t - 1]),
            )
            .unwrap();
            // Off-diagonal mass is at most ~e^{-50}·Σ|φ(k)ᵀv| ≈ 1e-21.
            assert!(max_diff(&ht.matrix, &own) <= 1e-15);
        }
    }

    #[test]
    fn exponential_decay_matches_reverse_order_loop() {
        let inp = random_inputs(10, 3, 12);
        let phi = elu_plus_one();
        let w = 0.5;
        let fk = map_rows(inp.k(), &phi).unwrap();
        for t in 1..=10 {
            let ht = decayed_state(inp.k(), inp.v(), &phi, &|d| (-w * d as f64).exp(), t).unwrap();
            let mut oracle = Tensor::zeros(vec![3, 3]);
            for i in (0..10).rev() {
                let dist = (t as f64 - 1.0 - i as f64).abs();
                let weight = (-w * dist).exp();
                for a in 0..3 {
                    for j in 0..3 {
                        oracle.data_mut()[a * 3 + j] += weight * fk.at(i, a) * inp.v().at(i, j);
                    }
                }
            }
            assert!(max_diff(&ht.matrix, &oracle) <= 1e-12);
        }
    }

    #[test]
    fn decayed_state_index_errors() {
        let inp = random_inputs(3, 2, 13);
        let phi = elu_plus_one();
        assert!(matches!(
            decayed_state(inp.k(), inp.v(), &phi, &|_| 1.0, 0),
            Err(Error::Index { .. })
        ));
        assert!(decayed_state(inp.k(), inp.v(), &phi, &|_| 1.0, 4).is_err());
    }

    #[test]
    fn effective_range_values() {
        assert!((effective_range(1.0, (-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-15);
        assert!((effective_range(0.5, 0.01).unwrap() - 9.210_340_371_976_184).abs() < 1e-12);
        assert!(effective_range(0.0, 0.1).is_err());
        assert!(effective_range(1.0, 1.0).is_err());
        let mut r = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let w = r.gen_range(0.01..5.0);
            let eps = r.gen_range(1e-9..0.999);
            let xi = effective_range(w, eps).unwrap();
            assert!(((-w * xi).exp() - eps).abs() <= 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn exp_kernel_specializes_to_softmax(seed in any::<u64>(), n in 1usize..=32, d in 1usize..=8) {
                let inp = random_inputs(n, d, seed);
                let a = kernel_attention(&inp, &SimilarityKernel::exp_dot()).unwrap();
                let b = softmax_attention(&inp).unwrap();
                prop_assert!(max_diff(&a, &b) <= 1e-12);
            }

            #[test]
            fn softmax_output_in_value_hull(seed in any::<u64>(), n in 1usize..=16, d in 1usize..=6) {
                let inp = random_inputs(n, d, seed);
                let out = softmax_attention(&inp).unwrap();
                for j in 0..d {
                    let lo = (0..n).map(|i| inp.v().at(i, j)).fold(f64::INFINITY, f64::min);
                    let hi = (0..n).map(|i| inp.v().at(i, j)).fold(f64::NEG_INFINITY, f64::max);
                    for t in 0..n {
                        prop_assert!(out.at(t, j) >= lo - 1e-12 && out.at(t, j) <= hi + 1e-12);
                    }
                }
            }

            #[test]
            fn decay_contributions_non_increasing(w in 0.01f64..3.0, n in 2usize..12, seed in any::<u64>()) {
                // Every token shares one key row and one value magnitude; isolate token i by zeroing the others.
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let krow = Tensor::randn(vec![1, 2], 1.0, &mut r);
                let keys = Tensor::from_fn(vec![n, 2], |e| krow.data()[e % 2]);
                let phi = elu_plus_one();
                let t = r.gen_range(1..=n);
                let mut by_distance = vec![f64::NAN; n];
                for i in 0..n {
                    let values = Tensor::from_fn(vec![n, 2], |e| if e / 2 == i { 1.0 } else { 0.0 });
                    let h = decayed_state(&keys, &values, &phi, &|d| (-w * d as f64).exp(), t).unwrap();
                    by_distance[(t - 1).abs_diff(i)] = h.matrix.norm();
                }
                let seen: Vec<f64> = by_distance.into_iter().filter(|v| !v.is_nan()).collect();
                for pair in seen.windows(2) {
                    prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
                }
            }
        }
    }
}
