//! Hidden state bridge: sample a shallow WKV state, project it, and gate it
//! into a deeper softmax layer's input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::numerics::linear::prefixed;
use crate::numerics::ops::{sigmoid, sigmoid_backward};
use crate::numerics::{LinearProjection, Parameters, Tensor};

/// Center-aligned stride indices `floor((j + 0.5)·n_src / n_out)`.
pub fn equidistant_indices(n_src: usize, n_out: usize) -> Result<Vec<usize>> {
    if n_out == 0 || n_out > n_src {
        return Err(Error::Sampling { n_src, n_out });
    }
    Ok((0..n_out).map(|j| (2 * j + 1) * n_src / (2 * n_out)).collect())
}

pub fn sample_equidistant(tokens: &Tensor, n_out: usize) -> Result<Tensor> {
    Ok(tokens.gather_rows(&equidistant_indices(tokens.rows(), n_out)?))
}

/// Row indices of a separable equidistant subsample of an `h × w` grid.
pub fn grid_sample_indices(h: usize, w: usize, h_out: usize, w_out: usize) -> Result<Vec<usize>> {
    let rows = equidistant_indices(h, h_out)?;
    let cols = equidistant_indices(w, w_out)?;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| r * w + c))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsbParams {
    /// `C_src → C_dst`.
    pub proj: LinearProjection,
    /// `C_dst → C_dst`.
    pub gate: LinearProjection,
}

impl HsbParams {
    pub fn init<R: Rng + ?Sized>(src_dim: usize, dst_dim: usize, rng: &mut R) -> Self {
        Self {
            proj: LinearProjection::init(src_dim, dst_dim, false, rng),
            gate: LinearProjection::init(dst_dim, dst_dim, false, rng),
        }
    }

    pub fn zeros(src_dim: usize, dst_dim: usize) -> Self {
        Self {
            proj: LinearProjection::zeros(src_dim, dst_dim, false),
            gate: LinearProjection::zeros(dst_dim, dst_dim, false),
        }
    }
}

impl Parameters for HsbParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("proj", self.proj.params());
        v.extend(prefixed("gate", self.gate.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.proj.params_mut();
        v.extend(self.gate.params_mut());
        v
    }
}

/// `(d_dst, d_src, parameter grads)` from the cotangent of the fused tokens.
pub type BridgePullback<'a> = Box<dyn FnOnce(&Tensor) -> Result<(Tensor, Tensor, HsbParams)> + 'a>;

pub struct BridgeOutput<'a> {
    pub fused: Tensor,
    /// Projected sample `X_HSB`, `T_dst × C_dst`.
    pub bridged: Tensor,
    pub pullback: BridgePullback<'a>,
}

/// Sequence form: `dst + σ(dst·W_g) ⊙ (sample(src, T_dst)·W_HSB)`.
pub fn hidden_state_bridge(src: &Tensor, dst: &Tensor, p: &HsbParams) -> Result<Tensor> {
    let idx = equidistant_indices(src.rows(), dst.rows())?;
    Ok(fuse(src, dst, idx, p)?.fused)
}

/// Grid form used inside the backbone, sampling rows and columns separately.
pub fn hidden_state_bridge_grid<'a>(src: &TokenGrid, dst: &TokenGrid, p: &'a HsbParams) -> Result<BridgeOutput<'a>> {
    let idx = grid_sample_indices(src.height, src.width, dst.height, dst.width)?;
    fuse(&src.tokens, &dst.tokens, idx, p)
}

fn fuse<'a>(src: &Tensor, dst: &Tensor, idx: Vec<usize>, p: &'a HsbParams) -> Result<BridgeOutput<'a>> {
    if src.cols() != p.proj.in_dim() || dst.cols() != p.proj.out_dim() {
        return Err(Error::Route {
            route: format!("{}->{}", src.cols(), dst.cols()),
            reason: format!(
                "projection expects {} -> {} channels",
                p.proj.in_dim(),
                p.proj.out_dim()
            ),
        });
    }
    let sampled = src.gather_rows(&idx);
    let bridged = p.proj.forward(&sampled)?;
    let gate = sigmoid(&p.gate.forward(dst)?);
    let mut fused = dst.clone();
    for ((f, s), b) in fused.data_mut().iter_mut().zip(gate.data()).zip(bridged.data()) {
        *f += s * b;
    }
    let n_src = src.rows();
    let dst = dst.clone();
    let out_bridged = bridged.clone();
    let pullback: BridgePullback<'a> = Box::new(move |g| {
        let d_bridged = g.zip_map(&gate, "hsb", |a, b| a * b)?;
        let d_gate = g.zip_map(&bridged, "hsb", |a, b| a * b)?;
        let d_z = sigmoid_backward(&gate, &d_gate)?;
        let (d_dst_gate, g_gate) = p.gate.backward(&dst, &d_z)?;
        let (d_sampled, g_proj) = p.proj.backward(&sampled, &d_bridged)?;
        let mut d_src = Tensor::zeros(vec![n_src, sampled.cols()]);
        for (row, &i) in idx.iter().enumerate() {
            for (o, v) in d_src.row_mut(i).iter_mut().zip(d_sampled.row(row)) {
                *o += v;
            }
        }
        Ok((
            g.add(&d_dst_gate)?,
            d_src,
            HsbParams {
                proj: g_proj,
                gate: g_gate,
            },
        ))
    });
    Ok(BridgeOutput {
        fused,
        bridged: out_bridged,
        pullback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(equidistant_indices(16, 4).unwrap(), vec![2, 6, 10, 14]);
        assert_eq!(equidistant_indices(7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(matches!(equidistant_indices(3, 4), Err(Error::Sampling { .. })));
        assert!(equidistant_indices(3, 0).is_err());
    }

    #[test]
    fn sampled_indices_strictly_increase_exhaustively() {
        for n_src in 1..=64 {
            for n_out in 1..=n_src {
                let idx = equidistant_indices(n_src, n_out).unwrap();
                let floor_rule: Vec<usize> = (0..n_out)
                    .map(|j| ((j as f64 + 0.5) * n_src as f64 / n_out as f64).floor() as usize)
                    .collect();
                assert_eq!(idx, floor_rule);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(*idx.last().unwrap() < n_src);
            }
        }
    }

    #[test]
    fn zero_gate_halves_the_bridge() {
        let mut p = HsbParams::init(3, 4, &mut rng(0));
        p.gate = LinearProjection::zeros(4, 4, false);
        let src = Tensor::randn(vec![10, 3], 1.0, &mut rng(1));
        let dst = Tensor::randn(vec![5, 4], 1.0, &mut rng(2));
        let y = hidden_state_bridge(&src, &dst, &p).unwrap();
        let x_hsb = p.proj.forward(&sample_equidistant(&src, 5).unwrap()).unwrap();
        let expected = dst.add(&x_hsb.scale(0.5)).unwrap();
        assert!(y.sub(&expected).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn zero_projection_is_silent() {
        let mut p = HsbParams::init(3, 4, &mut rng(3));
        p.proj = LinearProjection::zeros(3, 4, false);
        let src = Tensor::randn(vec![10, 3], 1.0, &mut rng(4));
        let dst = Tensor::randn(vec![5, 4], 1.0, &mut rng(5));
        assert_eq!(hidden_state_bridge(&src, &dst, &p).unwrap(), dst);
    }

    #[test]
    fn route_shapes_at_stem_scale() {
        let p = HsbParams::init(96, 192, &mut rng(6));
        let src = TokenGrid::new(Tensor::randn(vec![3136, 96], 1.0, &mut rng(7)), 56, 56).unwrap();
        let dst = TokenGrid::new(Tensor::zeros(vec![196, 192]), 14, 14).unwrap();
        let out = hidden_state_bridge_grid(&src, &dst, &p).unwrap();
        assert_eq!(out.bridged.shape(), &[196, 192]);
        assert_eq!(out.fused.shape(), &[196, 192]);
        let mismatched = TokenGrid::new(Tensor::zeros(vec![196, 128]), 14, 14).unwrap();
        assert!(matches!(
            hidden_state_bridge_grid(&src, &mismatched, &p),
            Err(Error::Route { .. })
        ));
    }

    #[test]
    fn grid_sampling_is_separable() {
        let idx = grid_sample_indices(8, 6, 4, 3).unwrap();
        let rows = equidistant_indices(8, 4).unwrap();
        let cols = equidistant_indices(6, 3).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(i, rows[k / 3] * 6 + cols[k % 3]);
        }
    }

    #[test]
    fn bridge_gradcheck() {
        let p = HsbParams::init(3, 4, &mut rng(8));
        let src = TokenGrid::new(Tensor::randn(vec![16, 3], 1.0, &mut rng(9)), 4, 4).unwrap();
        let dst = TokenGrid::new(Tensor::randn(vec![4, 4], 1.0, &mut rng(10)), 2, 2).unwrap();
        let probe = Tensor::randn(vec![4, 4], 1.0, &mut rng(11));
        let out = hidden_state_bridge_grid(&src, &dst, &p).unwrap();
        let (d_dst, d_src, g) = (out.pullback)(&probe).unwrap();
        let mut inputs = vec![src.tokens.clone(), dst.tokens.clone()];
        inputs.extend(p.params().into_iter().map(|(_, t)| t.clone()));
        let mut grads = vec![d_src, d_dst];
        grads.extend(g.params().into_iter().map(|(_, t)| t.clone()));
        let rep = grad_check(
            |xs| {
                let mut q = p.clone();
                for (d, s) in q.params_mut().into_iter().zip(&xs[2..]) {
                    *d = s.clone();
                }
                let s = TokenGrid::new(xs[0].clone(), 4, 4)?;
                let d = TokenGrid::new(xs[1].clone(), 2, 2)?;
                let y = hidden_state_bridge_grid(&s, &d, &q)?.fused;
                Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
            },
            &inputs,
            &grads,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }
}
