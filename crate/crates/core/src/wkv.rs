//! Bidirectional WKV linear attention and the layer built around it.
//!
//! For every channel independently,
//!
//! ```text
//!          Σ_{i≠t} exp(−(|t−i|−1)/N·w + k_i)·v_i + exp(u + k_t)·v_t
//! wkv_t = ----------------------------------------------------------
//!          Σ_{i≠t} exp(−(|t−i|−1)/N·w + k_i)     + exp(u + k_t)
//! ```
//!
//! [`wkv_naive`] evaluates this literally in `O(N²)`; [`wkv_scan`] splits the
//! off-diagonal sum into a left-to-right and a right-to-left recurrence and
//! runs in `O(N)`. Both keep every exponential relative to a running maximum,
//! so keys far outside `exp`'s range are handled.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::numerics::linear::prefixed;
use crate::numerics::ops::{
    elementwise_mul, layer_norm_backward, layer_norm_cached, relu_sq, relu_sq_backward, sigmoid,
    sigmoid_backward, LAYER_NORM_EPS,
};
use crate::numerics::{LinearProjection, NormParams, Parameters, Tensor};

/// Operations charged per token per channel per scan direction.
pub const SCAN_STEP_OPS: u64 = 8;
/// Operations charged per token per channel to merge both directions with the bonus term.
pub const SCAN_COMBINE_OPS: u64 = 12;
/// Operations charged per (query, key, channel) triple by the naive evaluation.
pub const NAIVE_PAIR_OPS: u64 = 6;

/// Total scan operations for `n` tokens and `d` channels.
pub fn scan_op_count(n: usize, d: usize) -> u64 {
    (n * d) as u64 * (2 * SCAN_STEP_OPS + SCAN_COMBINE_OPS)
}

fn check_wkv_inputs(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = match k.shape() {
        &[n, d] if n >= 1 => (n, d),
        other => return Err(Error::shape("wkv", other, &[1, 0])),
    };
    v.expect_same_shape(k, "wkv values")?;
    w.expect_shape(&[d], "wkv decay")?;
    u.expect_shape(&[d], "wkv bonus")?;
    Ok((n, d))
}

/// Exponent of the off-diagonal weight between tokens at distance `dist ≥ 1`.
#[inline]
fn decay_exponent(dist: usize, n: usize, w: f64) -> f64 {
    -((dist as f64 - 1.0) / n as f64) * w
}

/// Literal double-loop evaluation; the reference the scan is checked against.
pub fn wkv_naive(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    wkv_naive_counted(k, v, w, u).map(|(y, _)| y)
}

pub fn wkv_naive_counted(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<(Tensor, u64)> {
    let (n, d) = check_wkv_inputs(k, v, w, u)?;
    let (kd, vd, wd, ud) = (k.data(), v.data(), w.data(), u.data());
    let mut out = vec![0.0; n * d];
    let mut ops = 0u64;
    let mut m = vec![0.0; d];
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for t in 0..n {
        for c in 0..d {
            m[c] = ud[c] + kd[t * d + c];
        }
        for i in (0..n).filter(|&i| i != t) {
            let dist = t.abs_diff(i);
            for c in 0..d {
                let e = decay_exponent(dist, n, wd[c]) + kd[i * d + c];
                if e > m[c] {
                    m[c] = e;
                }
            }
        }
        for c in 0..d {
            let e = (ud[c] + kd[t * d + c] - m[c]).exp();
            num[c] = e * vd[t * d + c];
            den[c] = e;
        }
        for i in (0..n).filter(|&i| i != t) {
            let dist = t.abs_diff(i);
            for c in 0..d {
                let e = (decay_exponent(dist, n, wd[c]) + kd[i * d + c] - m[c]).exp();
                num[c] += e * vd[i * d + c];
                den[c] += e;
            }
        }
        for c in 0..d {
            out[t * d + c] = num[c] / den[c];
        }
        ops += (n * d) as u64 * NAIVE_PAIR_OPS;
    }
    Ok((Tensor::new(vec![n, d], out)?, ops))
}

/// Running `(numerator, denominator, max exponent)` of one scan direction.
#[derive(Clone, Copy)]
struct ScanState {
    num: f64,
    den: f64,
    max: f64,
}

impl ScanState {
    const EMPTY: Self = Self {
        num: 0.0,
        den: 0.0,
        max: f64::NEG_INFINITY,
    };

    /// Decays the stored terms by `exp(−step)` and absorbs `exp(key)·value`.
    #[inline]
    fn push(self, step: f64, key: f64, value: f64) -> Self {
        let decayed = self.max - step;
        let max = decayed.max(key);
        let old = if self.max == f64::NEG_INFINITY { 0.0 } else { (decayed - max).exp() };
        let new = (key - max).exp();
        Self {
            num: old * self.num + new * value,
            den: old * self.den + new,
            max,
        }
    }
}

/// `O(N·d)` bidirectional scan, equal to [`wkv_naive`] up to rounding.
pub fn wkv_scan(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    wkv_scan_counted(k, v, w, u).map(|(y, _)| y)
}

pub fn wkv_scan_counted(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<(Tensor, u64)> {
    let (n, d) = check_wkv_inputs(k, v, w, u)?;
    let (kd, vd, wd, ud) = (k.data(), v.data(), w.data(), u.data());
    let step: Vec<f64> = wd.iter().map(|&wc| wc / n as f64).collect();
    let mut ops = 0u64;

    // forward[t] summarizes tokens i < t.
    let mut forward = vec![ScanState::EMPTY; n * d];
    let mut state = vec![ScanState::EMPTY; d];
    for t in 0..n {
        forward[t * d..(t + 1) * d].copy_from_slice(&state);
        for c in 0..d {
            state[c] = state[c].push(step[c], kd[t * d + c], vd[t * d + c]);
        }
        ops += d as u64 * SCAN_STEP_OPS;
    }

    let mut out = vec![0.0; n * d];
    let mut state = vec![ScanState::EMPTY; d];
    for t in (0..n).rev() {
        for c in 0..d {
            let (f, b) = (forward[t * d + c], state[c]);
            let bonus = ud[c] + kd[t * d + c];
            let m = bonus.max(f.max).max(b.max);
            let eb = (bonus - m).exp();
            let ef = if f.max == f64::NEG_INFINITY { 0.0 } else { (f.max - m).exp() };
            let er = if b.max == f64::NEG_INFINITY { 0.0 } else { (b.max - m).exp() };
            let num = ef * f.num + er * b.num + eb * vd[t * d + c];
            let den = ef * f.den + er * b.den + eb;
            out[t * d + c] = num / den;
        }
        for c in 0..d {
            state[c] = state[c].push(step[c], kd[t * d + c], vd[t * d + c]);
        }
        ops += d as u64 * (SCAN_STEP_OPS + SCAN_COMBINE_OPS);
    }
    Ok((Tensor::new(vec![n, d], out)?, ops))
}

/// The same two-direction recurrence without max-tracking.
///
/// Kept only as a fault-injection target for the oracle checks: it overflows
/// once `exp(k)` leaves the `f64` range.
pub fn wkv_scan_unstabilized(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (n, d) = check_wkv_inputs(k, v, w, u)?;
    let (kd, vd, wd, ud) = (k.data(), v.data(), w.data(), u.data());
    let mut fwd = vec![(0.0, 0.0); n * d];
    let mut acc = vec![(0.0f64, 0.0f64); d];
    for t in 0..n {
        fwd[t * d..(t + 1) * d].copy_from_slice(&acc);
        for c in 0..d {
            let decay = (-wd[c] / n as f64).exp();
            let e = kd[t * d + c].exp();
            acc[c] = (decay * acc[c].0 + e * vd[t * d + c], decay * acc[c].1 + e);
        }
    }
    let mut out = vec![0.0; n * d];
    let mut acc = vec![(0.0f64, 0.0f64); d];
    for t in (0..n).rev() {
        for c in 0..d {
            let eb = (ud[c] + kd[t * d + c]).exp();
            let (f, b) = (fwd[t * d + c], acc[c]);
            out[t * d + c] = (f.0 + b.0 + eb * vd[t * d + c]) / (f.1 + b.1 + eb);
            let decay = (-wd[c] / n as f64).exp();
            let e = kd[t * d + c].exp();
            acc[c] = (decay * acc[c].0 + e * vd[t * d + c], decay * acc[c].1 + e);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Gradients of the WKV map.
#[derive(Clone, Debug)]
pub struct WkvGrads {
    pub k: Tensor,
    pub v: Tensor,
    pub w: Tensor,
    pub u: Tensor,
}

/// Vector-Jacobian product of the WKV map given its output `y` and cotangent `g`.
///
/// Each output row is a softmax-weighted mean of value rows over the exponents
/// `e_ti`, so `∂e_ti = p_ti·g_t·(v_i − y_t)`. Costs `O(N²·d)`.
pub fn wkv_backward(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor, y: &Tensor, g: &Tensor) -> Result<WkvGrads> {
    let (n, d) = check_wkv_inputs(k, v, w, u)?;
    y.expect_same_shape(k, "wkv output")?;
    g.expect_same_shape(k, "wkv cotangent")?;
    let (kd, vd, wd, ud, yd, gd) = (k.data(), v.data(), w.data(), u.data(), y.data(), g.data());
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dw = vec![0.0; d];
    let mut du = vec![0.0; d];
    let mut e = vec![0.0; n];
    for c in 0..d {
        for t in 0..n {
            let gt = gd[t * d + c];
            if gt == 0.0 {
                continue;
            }
            let mut m = f64::NEG_INFINITY;
            for (i, ei) in e.iter_mut().enumerate() {
                *ei = if i == t {
                    ud[c] + kd[t * d + c]
                } else {
                    decay_exponent(t.abs_diff(i), n, wd[c]) + kd[i * d + c]
                };
                m = m.max(*ei);
            }
            let mut z = 0.0;
            for ei in e.iter_mut() {
                *ei = (*ei - m).exp();
                z += *ei;
            }
            let yt = yd[t * d + c];
            for (i, &ei) in e.iter().enumerate() {
                let p = ei / z;
                dv[i * d + c] += p * gt;
                let de = p * gt * (vd[i * d + c] - yt);
                dk[i * d + c] += de;
                if i == t {
                    du[c] += de;
                } else {
                    dw[c] -= de * (t.abs_diff(i) as f64 - 1.0) / n as f64;
                }
            }
        }
    }
    Ok(WkvGrads {
        k: Tensor::new(vec![n, d], dk)?,
        v: Tensor::new(vec![n, d], dv)?,
        w: Tensor::new(vec![d], dw)?,
        u: Tensor::new(vec![d], du)?,
    })
}

/// Parameters of the spatial-mix sub-module.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams {
    /// Channel-wise decay.
    pub w: Tensor,
    /// Channel-wise same-token bonus.
    pub u: Tensor,
    pub proj_r: LinearProjection,
    pub proj_k: LinearProjection,
    pub proj_v: LinearProjection,
    pub proj_out: LinearProjection,
    pub norm: NormParams,
}

/// Decay ramp over channels, from 1 to 8.
pub fn decay_ramp(dim: usize) -> Tensor {
    Tensor::from_fn(vec![dim], |c| {
        if dim == 1 {
            1.0
        } else {
            1.0 + 7.0 * c as f64 / (dim - 1) as f64
        }
    })
}

impl WkvParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            w: decay_ramp(dim),
            u: Tensor::zeros(vec![dim]),
            proj_r: LinearProjection::init(dim, dim, true, rng),
            proj_k: LinearProjection::init(dim, dim, true, rng),
            proj_v: LinearProjection::init(dim, dim, true, rng),
            proj_out: LinearProjection::init(dim, dim, true, rng),
            norm: NormParams::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

impl Parameters for WkvParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("w".to_string(), &self.w), ("u".to_string(), &self.u)];
        v.extend(prefixed("proj_r", self.proj_r.params()));
        v.extend(prefixed("proj_k", self.proj_k.params()));
        v.extend(prefixed("proj_v", self.proj_v.params()));
        v.extend(prefixed("proj_out", self.proj_out.params()));
        v.extend(prefixed("norm", self.norm.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w, &mut self.u];
        v.extend(self.proj_r.params_mut());
        v.extend(self.proj_k.params_mut());
        v.extend(self.proj_v.params_mut());
        v.extend(self.proj_out.params_mut());
        v.extend(self.norm.params_mut());
        v
    }
}

/// Parameters of the channel-mix sub-module; `proj_k` widens to the hidden size.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMixParams {
    pub proj_r: LinearProjection,
    pub proj_k: LinearProjection,
    pub proj_v: LinearProjection,
    pub norm: NormParams,
}

impl ChannelMixParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            proj_r: LinearProjection::init(dim, dim, true, rng),
            proj_k: LinearProjection::init(dim, hidden, true, rng),
            proj_v: LinearProjection::init(hidden, dim, true, rng),
            norm: NormParams::new(dim),
        }
    }
}

impl Parameters for ChannelMixParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("proj_r", self.proj_r.params());
        v.extend(prefixed("proj_k", self.proj_k.params()));
        v.extend(prefixed("proj_v", self.proj_v.params()));
        v.extend(prefixed("norm", self.norm.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.proj_r.params_mut();
        v.extend(self.proj_k.params_mut());
        v.extend(self.proj_v.params_mut());
        v.extend(self.norm.params_mut());
        v
    }
}

/// Pullback of a token-mixing block: `(dy, optional d(tap)) → (dx, parameter grads)`.
pub type BlockPullback<'a, G> = Box<dyn FnOnce(&Tensor, Option<&Tensor>) -> Result<(Tensor, G)> + 'a>;

/// Output of a differentiable spatial mix: new tokens, the WKV tap, and the pullback.
pub struct SpatialMixOutput<'a> {
    pub output: Tensor,
    pub wkv: Tensor,
    pub pullback: BlockPullback<'a, WkvParams>,
}

pub fn spatial_mix(x: &TokenGrid, p: &WkvParams) -> Result<Tensor> {
    Ok(spatial_mix_vjp(&x.tokens, p)?.output)
}

/// `x + proj_out(σ(R_s) ⊙ wkv(K_s, V_s))` on the layer-normalized input.
pub fn spatial_mix_vjp<'a>(x: &Tensor, p: &'a WkvParams) -> Result<SpatialMixOutput<'a>> {
    let (ln, ln_cache) = layer_norm_cached(x, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS)?;
    let r = p.proj_r.forward(&ln)?;
    let k = p.proj_k.forward(&ln)?;
    let v = p.proj_v.forward(&ln)?;
    let wkv = wkv_scan(&k, &v, &p.w, &p.u)?;
    let gate = sigmoid(&r);
    let gated = elementwise_mul(&gate, &wkv)?;
    let output = x.add(&p.proj_out.forward(&gated)?)?;
    let tap = wkv.clone();
    let pullback: BlockPullback<'a, WkvParams> = Box::new(move |g, g_tap| {
        let (d_gated, g_out) = p.proj_out.backward(&gated, g)?;
        let mut d_wkv = elementwise_mul(&d_gated, &gate)?;
        if let Some(gt) = g_tap {
            d_wkv.axpy(1.0, gt)?;
        }
        let d_gate = elementwise_mul(&d_gated, &wkv)?;
        let d_r = sigmoid_backward(&gate, &d_gate)?;
        let wg = wkv_backward(&k, &v, &p.w, &p.u, &wkv, &d_wkv)?;
        let (mut d_ln, g_r) = p.proj_r.backward(&ln, &d_r)?;
        let (d_ln_k, g_k) = p.proj_k.backward(&ln, &wg.k)?;
        let (d_ln_v, g_v) = p.proj_v.backward(&ln, &wg.v)?;
        d_ln.axpy(1.0, &d_ln_k)?;
        d_ln.axpy(1.0, &d_ln_v)?;
        let (d_x, g_gain, g_shift) = layer_norm_backward(&ln_cache, &p.norm.gain, &d_ln)?;
        let dx = g.add(&d_x)?;
        Ok((
            dx,
            WkvParams {
                w: wg.w,
                u: wg.u,
                proj_r: g_r,
                proj_k: g_k,
                proj_v: g_v,
                proj_out: g_out,
                norm: NormParams {
                    gain: g_gain,
                    shift: g_shift,
                },
            },
        ))
    });
    Ok(SpatialMixOutput {
        output,
        wkv: tap,
        pullback,
    })
}

pub fn channel_mix(x: &TokenGrid, p: &ChannelMixParams) -> Result<Tensor> {
    Ok(channel_mix_vjp(&x.tokens, p)?.0)
}

/// `x + σ(R_c) ⊙ proj_v(ReLU²(K_c))` on the layer-normalized input.
pub fn channel_mix_vjp<'a>(
    x: &Tensor,
    p: &'a ChannelMixParams,
) -> Result<(Tensor, Box<dyn FnOnce(&Tensor) -> Result<(Tensor, ChannelMixParams)> + 'a>)> {
    let (ln, ln_cache) = layer_norm_cached(x, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS)?;
    let r = p.proj_r.forward(&ln)?;
    let kc = p.proj_k.forward(&ln)?;
    let act = relu_sq(&kc);
    let vc = p.proj_v.forward(&act)?;
    let gate = sigmoid(&r);
    let y = x.add(&elementwise_mul(&gate, &vc)?)?;
    let pullback = Box::new(move |g: &Tensor| {
        let d_vc = elementwise_mul(g, &gate)?;
        let d_r = sigmoid_backward(&gate, &elementwise_mul(g, &vc)?)?;
        let (d_act, g_v) = p.proj_v.backward(&act, &d_vc)?;
        let d_kc = relu_sq_backward(&kc, &d_act)?;
        let (mut d_ln, g_k) = p.proj_k.backward(&ln, &d_kc)?;
        let (d_ln_r, g_r) = p.proj_r.backward(&ln, &d_r)?;
        d_ln.axpy(1.0, &d_ln_r)?;
        let (d_x, g_gain, g_shift) = layer_norm_backward(&ln_cache, &p.norm.gain, &d_ln)?;
        Ok((
            g.add(&d_x)?,
            ChannelMixParams {
                proj_r: g_r,
                proj_k: g_k,
                proj_v: g_v,
                norm: NormParams {
                    gain: g_gain,
                    shift: g_shift,
                },
            },
        ))
    });
    Ok((y, pullback))
}

/// Spatial mix followed by channel mix.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvLayerParams {
    pub spatial: WkvParams,
    pub channel: ChannelMixParams,
}

impl WkvLayerParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden_ratio: usize, rng: &mut R) -> Self {
        Self {
            spatial: WkvParams::init(dim, rng),
            channel: ChannelMixParams::init(dim, hidden_ratio * dim, rng),
        }
    }
}

impl Parameters for WkvLayerParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("spatial", self.spatial.params());
        v.extend(prefixed("channel", self.channel.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.spatial.params_mut();
        v.extend(self.channel.params_mut());
        v
    }
}

/// Layer output plus the spatial-mix WKV tensor exposed for the hidden state bridge.
pub struct WkvLayerOutput<'a> {
    pub output: TokenGrid,
    pub hidden: Tensor,
    pub pullback: BlockPullback<'a, WkvLayerParams>,
}

pub fn wkv_layer(x: &TokenGrid, p: &WkvLayerParams) -> Result<(TokenGrid, Tensor)> {
    let out = wkv_layer_vjp(x, p)?;
    Ok((out.output, out.hidden))
}

pub fn wkv_layer_vjp<'a>(x: &TokenGrid, p: &'a WkvLayerParams) -> Result<WkvLayerOutput<'a>> {
    let spatial = spatial_mix_vjp(&x.tokens, &p.spatial)?;
    let (y, channel_pb) = channel_mix_vjp(&spatial.output, &p.channel)?;
    let spatial_pb = spatial.pullback;
    Ok(WkvLayerOutput {
        output: x.with_tokens(y)?,
        hidden: spatial.wkv,
        pullback: Box::new(move |g, g_tap| {
            let (d_mid, g_channel) = channel_pb(g)?;
            let (dx, g_spatial) = spatial_pb(&d_mid, g_tap)?;
            Ok((
                dx,
                WkvLayerParams {
                    spatial: g_spatial,
                    channel: g_channel,
                },
            ))
        }),
    })
}
