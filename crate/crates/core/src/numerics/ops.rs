//! Primitive operations and their vector-Jacobian products.
//!
//! Every primitive comes in two flavours: a plain forward function, and a
//! `*_vjp` variant returning a [`DualValue`] whose pullback maps an output
//! cotangent to one cotangent per differentiable input. The backward rules
//! are also exposed as free functions so layers can chain them without
//! boxing closures for every intermediate.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type Pullback<'a> = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>> + 'a>;

/// A forward value paired with its pullback.
pub struct DualValue<'a> {
    pub value: Tensor,
    pullback: Pullback<'a>,
}

impl<'a> DualValue<'a> {
    pub fn new(value: Tensor, pullback: Pullback<'a>) -> Self {
        Self { value, pullback }
    }

    pub fn pullback(&self, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        cotangent.expect_same_shape(&self.value, "pullback")?;
        (self.pullback)(cotangent)
    }
}

impl std::fmt::Debug for DualValue<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualValue").field("value", &self.value).finish_non_exhaustive()
    }
}

fn expect_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_rank2(a, "matmul")?;
    let (k2, n) = expect_rank2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = expect_rank2(a, "matmul_tn")?;
    let (k2, n) = expect_rank2(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_rank2(a, "matmul_nt")?;
    let (n, k2) = expect_rank2(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(g, b)?, matmul_tn(a, g)?))
}

pub fn matmul_vjp<'a>(a: &'a Tensor, b: &'a Tensor) -> Result<DualValue<'a>> {
    let value = matmul(a, b)?;
    Ok(DualValue::new(
        value,
        Box::new(move |g| {
            let (ga, gb) = matmul_backward(a, b, g)?;
            Ok(vec![ga, gb])
        }),
    ))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, _) = x.dims2();
    let mut out = x.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Given softmax output `y` and cotangent `g`: `y ⊙ (g − Σ g⊙y)` per row.
pub fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    y.expect_same_shape(g, "softmax_rows")?;
    let mut out = g.clone();
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dot: f64 = yr.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
        for (o, &yv) in out.row_mut(i).iter_mut().zip(yr) {
            *o = yv * (*o - dot);
        }
    }
    Ok(out)
}

pub fn softmax_rows_vjp(x: &Tensor) -> DualValue<'static> {
    let y = softmax_rows(x);
    let cache = y.clone();
    DualValue::new(y, Box::new(move |g| Ok(vec![softmax_rows_backward(&cache, g)?])))
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Tensor,
    rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gain, shift, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (r, d) = x.dims2();
    if d == 0 || x.shape().is_empty() {
        return Err(Error::EmptyAxis { op: "layer_norm" });
    }
    gain.expect_shape(&[d], "layer_norm gain")?;
    shift.expect_shape(&[d], "layer_norm shift")?;
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        let nrow = normalized.row_mut(i);
        for (n, &v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * rs;
        }
        let nrow = normalized.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = nrow[j] * gain.data()[j] + shift.data()[j];
        }
    }
    Ok((out, LayerNormCache { normalized, rstd }))
}

/// Returns `(dx, dgain, dshift)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    g.expect_same_shape(&cache.normalized, "layer_norm")?;
    let (r, d) = g.dims2();
    let mut dx = g.clone();
    let mut dgain = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..r {
        let gr = g.row(i);
        let xh = cache.normalized.row(i);
        for j in 0..d {
            dgain[j] += gr[j] * xh[j];
            dshift[j] += gr[j];
            dxhat[j] = gr[j] * gain.data()[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    Ok((dx, Tensor::new(vec![d], dgain)?, Tensor::new(vec![d], dshift)?))
}

pub fn layer_norm_vjp<'a>(
    x: &Tensor,
    gain: &'a Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<DualValue<'a>> {
    let (y, cache) = layer_norm_cached(x, gain, shift, eps)?;
    Ok(DualValue::new(
        y,
        Box::new(move |g| {
            let (dx, dg, ds) = layer_norm_backward(&cache, gain, g)?;
            Ok(vec![dx, dg, ds])
        }),
    ))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Given sigmoid output `s`: `g ⊙ s ⊙ (1 − s)`.
pub fn sigmoid_backward(s: &Tensor, g: &Tensor) -> Result<Tensor> {
    g.zip_map(s, "sigmoid", |gv, sv| gv * sv * (1.0 - sv))
}

pub fn sigmoid_vjp(x: &Tensor) -> DualValue<'static> {
    let s = sigmoid(x);
    let cache = s.clone();
    DualValue::new(s, Box::new(move |g| Ok(vec![sigmoid_backward(&cache, g)?])))
}

pub fn relu_sq(x: &Tensor) -> Tensor {
    x.map(|v| {
        let r = v.max(0.0);
        r * r
    })
}

/// Given the pre-activation `x`: `g ⊙ 2·max(x, 0)`.
pub fn relu_sq_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    g.zip_map(x, "relu_sq", |gv, xv| gv * 2.0 * xv.max(0.0))
}

pub fn relu_sq_vjp(x: &Tensor) -> DualValue<'_> {
    DualValue::new(relu_sq(x), Box::new(move |g| Ok(vec![relu_sq_backward(x, g)?])))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

pub fn gelu_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    g.zip_map(x, "gelu", |gv, xv| {
        let cdf = 0.5 * (1.0 + libm::erf(xv * std::f64::consts::FRAC_1_SQRT_2));
        let pdf = FRAC_1_SQRT_2PI * (-0.5 * xv * xv).exp();
        gv * (cdf + xv * pdf)
    })
}

pub fn gelu_vjp(x: &Tensor) -> DualValue<'_> {
    DualValue::new(gelu(x), Box::new(move |g| Ok(vec![gelu_backward(x, g)?])))
}

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "elementwise_mul", |x, y| x * y)
}

pub fn elementwise_mul_vjp<'a>(a: &'a Tensor, b: &'a Tensor) -> Result<DualValue<'a>> {
    let value = elementwise_mul(a, b)?;
    Ok(DualValue::new(
        value,
        Box::new(move |g| Ok(vec![elementwise_mul(g, b)?, elementwise_mul(g, a)?])),
    ))
}

fn conv_dims(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize)> {
    let (h, w, c) = match x.shape() {
        &[h, w, c] if h >= 1 && w >= 1 => (h, w, c),
        other => return Err(Error::shape("depthwise_conv3x3", other, &[0, 0, 0])),
    };
    kernel.expect_shape(&[3, 3, c], "depthwise_conv3x3 kernel")?;
    Ok((h, w, c))
}

/// Per-channel 3×3 convolution (cross-correlation) with zero padding of 1.
pub fn depthwise_conv3x3(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, c) = conv_dims(x, kernel)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
            for di in 0..3 {
                let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else {
                    continue;
                };
                for dj in 0..3 {
                    let Some(sj) = (j + dj).checked_sub(1).filter(|&s| s < w) else {
                        continue;
                    };
                    let xs = &xd[(si * w + sj) * c..(si * w + sj + 1) * c];
                    let ks = &kd[(di * 3 + dj) * c..(di * 3 + dj + 1) * c];
                    for ch in 0..c {
                        o[ch] += ks[ch] * xs[ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Returns `(dx, dkernel)`.
pub fn depthwise_conv3x3_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = conv_dims(x, kernel)?;
    g.expect_same_shape(x, "depthwise_conv3x3")?;
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    let mut dx = vec![0.0; h * w * c];
    let mut dk = vec![0.0; 9 * c];
    for i in 0..h {
        for j in 0..w {
            let go = &gd[(i * w + j) * c..(i * w + j + 1) * c];
            for di in 0..3 {
                let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else {
                    continue;
                };
                for dj in 0..3 {
                    let Some(sj) = (j + dj).checked_sub(1).filter(|&s| s < w) else {
                        continue;
                    };
                    let base = (si * w + sj) * c;
                    let kb = (di * 3 + dj) * c;
                    for ch in 0..c {
                        dx[base + ch] += kd[kb + ch] * go[ch];
                        dk[kb + ch] += xd[base + ch] * go[ch];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![h, w, c], dx)?, Tensor::new(vec![3, 3, c], dk)?))
}

pub fn depthwise_conv3x3_vjp<'a>(x: &'a Tensor, kernel: &'a Tensor) -> Result<DualValue<'a>> {
    let value = depthwise_conv3x3(x, kernel)?;
    Ok(DualValue::new(
        value,
        Box::new(move |g| {
            let (dx, dk) = depthwise_conv3x3_backward(x, kernel, g)?;
            Ok(vec![dx, dk])
        }),
    ))
}
