//! Global multi-head self-attention followed by an MLP with a 3×3 depthwise
//! convolution between its projections. Attention always spans all tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::numerics::linear::prefixed;
use crate::numerics::ops::{
    depthwise_conv3x3, depthwise_conv3x3_backward, gelu, gelu_backward, layer_norm_backward,
    layer_norm_cached, matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, LAYER_NORM_EPS,
};
use crate::numerics::{LinearProjection, NormParams, Parameters, Tensor};
use crate::wkv::BlockPullback;

#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams {
    pub heads: usize,
    pub proj_qkv: LinearProjection,
    pub proj_out: LinearProjection,
    pub norm: NormParams,
}

impl MhsaParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            proj_qkv: LinearProjection::init(dim, 3 * dim, true, rng),
            proj_out: LinearProjection::init(dim, dim, true, rng),
            norm: NormParams::new(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj_out.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(
            "heads",
            format!("dimension {dim} is not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

impl Parameters for MhsaParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("proj_qkv", self.proj_qkv.params());
        v.extend(prefixed("proj_out", self.proj_out.params()));
        v.extend(prefixed("norm", self.norm.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.proj_qkv.params_mut();
        v.extend(self.proj_out.params_mut());
        v.extend(self.norm.params_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvMlpParams {
    pub proj_up: LinearProjection,
    pub dw_kernel: Tensor,
    pub dw_bias: Tensor,
    pub proj_down: LinearProjection,
    pub norm: NormParams,
}

impl ConvMlpParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be at least 1"));
        }
        let hidden = ratio * dim;
        Ok(Self {
            proj_up: LinearProjection::init(dim, hidden, true, rng),
            dw_kernel: Tensor::randn(vec![3, 3, hidden], 1.0 / 3.0, rng),
            dw_bias: Tensor::zeros(vec![hidden]),
            proj_down: LinearProjection::init(hidden, dim, true, rng),
            norm: NormParams::new(dim),
        })
    }

    pub fn hidden(&self) -> usize {
        self.proj_up.out_dim()
    }
}

impl Parameters for ConvMlpParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("proj_up", self.proj_up.params());
        v.push(("dw_kernel".into(), &self.dw_kernel));
        v.push(("dw_bias".into(), &self.dw_bias));
        v.extend(prefixed("proj_down", self.proj_down.params()));
        v.extend(prefixed("norm", self.norm.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.proj_up.params_mut();
        v.push(&mut self.dw_kernel);
        v.push(&mut self.dw_bias);
        v.extend(self.proj_down.params_mut());
        v.extend(self.norm.params_mut());
        v
    }
}

/// Per-head attention probabilities `softmax(q_h k_hᵀ/√d_h)` of the normalized input.
pub fn attention_weights(x: &Tensor, p: &MhsaParams) -> Result<Vec<Tensor>> {
    check_heads(p.dim(), p.heads)?;
    let ln = crate::numerics::ops::layer_norm(x, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS)?;
    let qkv = p.proj_qkv.forward(&ln)?;
    let (d, dh) = (p.dim(), p.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    (0..p.heads)
        .map(|h| {
            let q = qkv.slice_cols(h * dh, dh);
            let k = qkv.slice_cols(d + h * dh, dh);
            Ok(softmax_rows(&matmul_nt(&q, &k)?.scale(scale)))
        })
        .collect()
}

pub fn mhsa(x: &TokenGrid, p: &MhsaParams) -> Result<Tensor> {
    Ok(mhsa_vjp(&x.tokens, p)?.0)
}

/// `x + proj_out(concat_h softmax(q_h k_hᵀ/√d_h) v_h)` on the layer-normalized input.
pub fn mhsa_vjp<'a>(
    x: &Tensor,
    p: &'a MhsaParams,
) -> Result<(Tensor, Box<dyn FnOnce(&Tensor) -> Result<(Tensor, MhsaParams)> + 'a>)> {
    check_heads(p.dim(), p.heads)?;
    let (ln, ln_cache) = layer_norm_cached(x, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS)?;
    let qkv = p.proj_qkv.forward(&ln)?;
    let (d, dh) = (p.dim(), p.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = Vec::with_capacity(p.heads);
    let mut heads_out = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q = qkv.slice_cols(h * dh, dh);
        let k = qkv.slice_cols(d + h * dh, dh);
        let v = qkv.slice_cols(2 * d + h * dh, dh);
        let a = softmax_rows(&matmul_nt(&q, &k)?.scale(scale));
        heads_out.push(matmul(&a, &v)?);
        probs.push(a);
    }
    let merged = Tensor::concat_cols(&heads_out)?;
    let y = x.add(&p.proj_out.forward(&merged)?)?;
    let pullback = Box::new(move |g: &Tensor| {
        let (d_merged, g_out) = p.proj_out.backward(&merged, g)?;
        let mut d_parts = Vec::with_capacity(3 * p.heads);
        let (mut dqs, mut dks, mut dvs) = (Vec::new(), Vec::new(), Vec::new());
        for (h, a) in probs.iter().enumerate() {
            let q = qkv.slice_cols(h * dh, dh);
            let k = qkv.slice_cols(d + h * dh, dh);
            let v = qkv.slice_cols(2 * d + h * dh, dh);
            let d_o = d_merged.slice_cols(h * dh, dh);
            let d_a = matmul_nt(&d_o, &v)?;
            dvs.push(matmul_tn(a, &d_o)?);
            let d_s = softmax_rows_backward(a, &d_a)?.scale(scale);
            dqs.push(matmul(&d_s, &k)?);
            dks.push(matmul_tn(&d_s, &q)?);
        }
        d_parts.extend(dqs);
        d_parts.extend(dks);
        d_parts.extend(dvs);
        let d_qkv = Tensor::concat_cols(&d_parts)?;
        let (d_ln, g_qkv) = p.proj_qkv.backward(&ln, &d_qkv)?;
        let (d_x, g_gain, g_shift) = layer_norm_backward(&ln_cache, &p.norm.gain, &d_ln)?;
        Ok((
            g.add(&d_x)?,
            MhsaParams {
                heads: p.heads,
                proj_qkv: g_qkv,
                proj_out: g_out,
                norm: NormParams {
                    gain: g_gain,
                    shift: g_shift,
                },
            },
        ))
    });
    Ok((y, pullback))
}

pub fn conv_mlp(x: &TokenGrid, p: &ConvMlpParams) -> Result<Tensor> {
    Ok(conv_mlp_vjp(x, p)?.0)
}

/// `x + down(gelu(dwconv3x3(up(LN(x))) + b))`, the conv running on the `H × W` grid.
pub fn conv_mlp_vjp<'a>(
    x: &TokenGrid,
    p: &'a ConvMlpParams,
) -> Result<(Tensor, Box<dyn FnOnce(&Tensor) -> Result<(Tensor, ConvMlpParams)> + 'a>)> {
    let (h, w, hidden) = (x.height, x.width, p.hidden());
    if x.tokens.rows() != h * w {
        return Err(Error::Grid {
            tokens: x.tokens.rows(),
            height: h,
            width: w,
        });
    }
    let (ln, ln_cache) = layer_norm_cached(&x.tokens, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS)?;
    let up = p.proj_up.forward(&ln)?.into_shape(vec![h, w, hidden])?;
    let mut conv = depthwise_conv3x3(&up, &p.dw_kernel)?;
    for i in 0..h * w {
        for (c, &b) in p.dw_bias.data().iter().enumerate() {
            conv.data_mut()[i * hidden + c] += b;
        }
    }
    let act = gelu(&conv).into_shape(vec![h * w, hidden])?;
    let y = x.tokens.add(&p.proj_down.forward(&act)?)?;
    let pullback = Box::new(move |g: &Tensor| {
        let (d_act, g_down) = p.proj_down.backward(&act, g)?;
        let d_conv = gelu_backward(&conv, &d_act.into_shape(vec![h, w, hidden])?)?;
        let d_bias = d_conv.reshape(vec![h * w, hidden])?.sum_rows();
        let (d_up, d_kernel) = depthwise_conv3x3_backward(&up, &p.dw_kernel, &d_conv)?;
        let (d_ln, g_up) = p.proj_up.backward(&ln, &d_up.into_shape(vec![h * w, hidden])?)?;
        let (d_x, g_gain, g_shift) = layer_norm_backward(&ln_cache, &p.norm.gain, &d_ln)?;
        Ok((
            g.add(&d_x)?,
            ConvMlpParams {
                proj_up: g_up,
                dw_kernel: d_kernel,
                dw_bias: d_bias,
                proj_down: g_down,
                norm: NormParams {
                    gain: g_gain,
                    shift: g_shift,
                },
            },
        ))
    });
    Ok((y, pullback))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxLayerParams {
    pub attn: MhsaParams,
    pub mlp: ConvMlpParams,
}

impl SoftmaxLayerParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MhsaParams::init(dim, heads, rng)?,
            mlp: ConvMlpParams::init(dim, mlp_ratio, rng)?,
        })
    }
}

impl Parameters for SoftmaxLayerParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("attn", self.attn.params());
        v.extend(prefixed("mlp", self.mlp.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.attn.params_mut();
        v.extend(self.mlp.params_mut());
        v
    }
}

pub fn softmax_layer(x: &TokenGrid, p: &SoftmaxLayerParams) -> Result<TokenGrid> {
    Ok(softmax_layer_vjp(x, p)?.0)
}

pub fn softmax_layer_vjp<'a>(
    x: &TokenGrid,
    p: &'a SoftmaxLayerParams,
) -> Result<(TokenGrid, BlockPullback<'a, SoftmaxLayerParams>)> {
    let (mid, attn_pb) = mhsa_vjp(&x.tokens, &p.attn)?;
    let mid = x.with_tokens(mid)?;
    let (y, mlp_pb) = conv_mlp_vjp(&mid, &p.mlp)?;
    let out = x.with_tokens(y)?;
    Ok((
        out,
        Box::new(move |g, _tap| {
            let (d_mid, g_mlp) = mlp_pb(g)?;
            let (dx, g_attn) = attn_pb(&d_mid)?;
            Ok((dx, SoftmaxLayerParams { attn: g_attn, mlp: g_mlp }))
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{softmax_attention, AttentionInputs};
    use crate::numerics::grad::{grad_check, GradCheckOptions};
    use crate::numerics::ops::layer_norm;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize<P: Parameters>(p: &mut P, seed: u64) {
        let mut r = rng(seed);
        for t in p.params_mut() {
            let noise = Tensor::randn(t.shape().to_vec(), 0.3, &mut r);
            t.axpy(1.0, &noise).unwrap();
        }
    }

    fn gradcheck_params<P, F>(x: &Tensor, p: &P, forward: F, analytic: (Tensor, P), probe: &Tensor) -> f64
    where
        P: Parameters + Clone,
        F: Fn(&Tensor, &P) -> Result<Tensor>,
    {
        let mut inputs = vec![x.clone()];
        inputs.extend(p.params().into_iter().map(|(_, t)| t.clone()));
        let mut grads = vec![analytic.0];
        grads.extend(analytic.1.params().into_iter().map(|(_, t)| t.clone()));
        let f = |xs: &[Tensor]| {
            let mut q = p.clone();
            for (dst, src) in q.params_mut().into_iter().zip(&xs[1..]) {
                *dst = src.clone();
            }
            let y = forward(&xs[0], &q)?;
            Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };
        grad_check(f, &inputs, &grads, &GradCheckOptions::default())
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(matches!(MhsaParams::init(10, 3, &mut rng(0)), Err(Error::Config { .. })));
    }

    #[test]
    fn single_head_matches_unscaled_reference_on_scaled_queries() {
        let mut p = MhsaParams::init(4, 1, &mut rng(1)).unwrap();
        randomize(&mut p, 2);
        p.proj_out = LinearProjection::new(Tensor::eye(4), Some(Tensor::zeros(vec![4]))).unwrap();
        let x = Tensor::randn(vec![6, 4], 1.0, &mut rng(3));
        let (y, _) = mhsa_vjp(&x, &p).unwrap();

        let ln = layer_norm(&x, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS).unwrap();
        let qkv = p.proj_qkv.forward(&ln).unwrap();
        let inp = AttentionInputs::new(
            qkv.slice_cols(0, 4).scale(0.5),
            qkv.slice_cols(4, 4),
            qkv.slice_cols(8, 4),
        )
        .unwrap();
        let expected = x.add(&softmax_attention(&inp).unwrap()).unwrap();
        assert!(y.sub(&expected).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let p = MhsaParams::init(4, 2, &mut rng(4)).unwrap();
        let x = Tensor::randn(vec![1, 4], 1.0, &mut rng(5));
        let (y, _) = mhsa_vjp(&x, &p).unwrap();
        let ln = layer_norm(&x, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS).unwrap();
        let v = p.proj_qkv.forward(&ln).unwrap().slice_cols(8, 4);
        let expected = x.add(&p.proj_out.forward(&v).unwrap()).unwrap();
        assert!(y.sub(&expected).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = MhsaParams::init(8, 2, &mut rng(6)).unwrap();
        let x = Tensor::randn(vec![9, 8], 3.0, &mut rng(7));
        for a in attention_weights(&x, &p).unwrap() {
            for i in 0..9 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_gradcheck() {
        let mut p = MhsaParams::init(8, 2, &mut rng(8)).unwrap();
        randomize(&mut p, 9);
        let x = Tensor::randn(vec![4, 8], 1.0, &mut rng(10));
        let probe = Tensor::randn(vec![4, 8], 1.0, &mut rng(11));
        let analytic = (mhsa_vjp(&x, &p).unwrap().1)(&probe).unwrap();
        let err = gradcheck_params(&x, &p, |x, p| Ok(mhsa_vjp(x, p)?.0), analytic, &probe);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn mhsa_is_permutation_equivariant() {
        let p = MhsaParams::init(8, 2, &mut rng(12)).unwrap();
        let x = Tensor::randn(vec![10, 8], 1.0, &mut rng(13));
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng(14));
        let (y, _) = mhsa_vjp(&x, &p).unwrap();
        let (yp, _) = mhsa_vjp(&x.gather_rows(&perm), &p).unwrap();
        assert!(yp.sub(&y.gather_rows(&perm)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn delta_kernel_reduces_to_plain_mlp() {
        let mut p = ConvMlpParams::init(4, 2, &mut rng(15)).unwrap();
        p.dw_kernel = Tensor::from_fn(vec![3, 3, 8], |i| if i / 8 == 4 { 1.0 } else { 0.0 });
        let x = TokenGrid::new(Tensor::randn(vec![6, 4], 1.0, &mut rng(16)), 2, 3).unwrap();
        let y = conv_mlp(&x, &p).unwrap();
        let ln = layer_norm(&x.tokens, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS).unwrap();
        let plain = x
            .tokens
            .add(&p.proj_down.forward(&gelu(&p.proj_up.forward(&ln).unwrap())).unwrap())
            .unwrap();
        assert!(y.sub(&plain).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn conv_mlp_rejects_bad_grid() {
        let p = ConvMlpParams::init(4, 2, &mut rng(17)).unwrap();
        let bad = TokenGrid {
            tokens: Tensor::zeros(vec![5, 4]),
            height: 2,
            width: 3,
        };
        assert!(matches!(conv_mlp(&bad, &p), Err(Error::Grid { .. })));
    }

    #[test]
    fn conv_mlp_gradcheck() {
        let mut p = ConvMlpParams::init(4, 2, &mut rng(18)).unwrap();
        randomize(&mut p, 19);
        let x = Tensor::randn(vec![9, 4], 1.0, &mut rng(20));
        let probe = Tensor::randn(vec![9, 4], 1.0, &mut rng(21));
        let grid = |t: &Tensor| TokenGrid::new(t.clone(), 3, 3);
        let analytic = (conv_mlp_vjp(&grid(&x).unwrap(), &p).unwrap().1)(&probe).unwrap();
        let err = gradcheck_params(&x, &p, |x, p| Ok(conv_mlp_vjp(&grid(x)?, p)?.0), analytic, &probe);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn layer_shapes_and_composition() {
        let p = SoftmaxLayerParams::init(96, 3, 4, &mut rng(22)).unwrap();
        let x = TokenGrid::new(Tensor::randn(vec![49, 96], 1.0, &mut rng(23)), 7, 7).unwrap();
        let y = softmax_layer(&x, &p).unwrap();
        assert_eq!(y.tokens.shape(), &[49, 96]);
        let mid = x.with_tokens(mhsa(&x, &p.attn).unwrap()).unwrap();
        assert_eq!(conv_mlp(&mid, &p.mlp).unwrap(), y.tokens);
    }

    #[test]
    fn softmax_layer_gradcheck() {
        let mut p = SoftmaxLayerParams::init(4, 2, 2, &mut rng(24)).unwrap();
        randomize(&mut p, 25);
        let x = Tensor::randn(vec![6, 4], 1.0, &mut rng(26));
        let probe = Tensor::randn(vec![6, 4], 1.0, &mut rng(27));
        let grid = |t: &Tensor| TokenGrid::new(t.clone(), 2, 3);
        let analytic = (softmax_layer_vjp(&grid(&x).unwrap(), &p).unwrap().1)(&probe, None).unwrap();
        let err = gradcheck_params(
            &x,
            &p,
            |x, p| Ok(softmax_layer_vjp(&grid(x)?, p)?.0.tokens),
            analytic,
            &probe,
        );
        assert!(err <= 1e-4, "{err}");
    }
}
