use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{matmul, matmul_backward};
use crate::numerics::Tensor;

/// A bag of named trainable tensors in a fixed order.
///
/// Gradients are carried in a value of the same type, so `params()` of a
/// parameter set and of its gradient line up entry for entry.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.params_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    /// `self += alpha * other`, entry by entry.
    fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        let src = other.params();
        let mut dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(Error::param("parameters", "structure mismatch"));
        }
        for (d, (_, s)) in dst.iter_mut().zip(src) {
            d.axpy(alpha, s)?;
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Affine map `x·W + b` on the rows of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProjection {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearProjection {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, out) = match weight.shape() {
            &[i, o] => (i, o),
            other => return Err(Error::shape("linear weight", other, &[0, 0])),
        };
        if let Some(b) = &bias {
            b.expect_shape(&[out], "linear bias")?;
        }
        Ok(Self { weight, bias })
    }

    /// Weights ~ N(0, 1/in_dim), zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(vec![in_dim, out_dim], (1.0 / in_dim as f64).sqrt(), rng),
            bias: bias.then(|| Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(vec![in_dim, out_dim]),
            bias: bias.then(|| Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        if let Some(b) = &self.bias {
            let bd = b.data();
            for i in 0..y.rows() {
                for (v, &bv) in y.row_mut(i).iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }

    /// Returns `dx` and the parameter gradient.
    pub fn backward(&self, x: &Tensor, g: &Tensor) -> Result<(Tensor, LinearProjection)> {
        let (dx, dw) = matmul_backward(x, &self.weight, g)?;
        let db = self.bias.as_ref().map(|_| g.sum_rows());
        Ok((dx, LinearProjection { weight: dw, bias: db }))
    }
}

impl Parameters for LinearProjection {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

/// Gain and shift of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl NormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::full(vec![dim], 1.0),
            shift: Tensor::zeros(vec![dim]),
        }
    }
}

impl Parameters for NormParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("gain".into(), &self.gain), ("shift".into(), &self.shift)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gain, &mut self.shift]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bias_shape_is_validated() {
        assert!(LinearProjection::new(Tensor::zeros(vec![3, 2]), Some(Tensor::zeros(vec![3]))).is_err());
        assert!(LinearProjection::new(Tensor::zeros(vec![3, 2]), Some(Tensor::zeros(vec![2]))).is_ok());
    }

    #[test]
    fn linear_gradcheck() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut p = LinearProjection::init(4, 3, true, &mut r);
        p.bias = Some(Tensor::randn(vec![3], 1.0, &mut r));
        let x = Tensor::randn(vec![5, 4], 1.0, &mut r);
        let probe = Tensor::randn(vec![5, 3], 1.0, &mut r);
        let (dx, gp) = p.backward(&x, &probe).unwrap();
        let f = |xs: &[Tensor]| {
            let q = LinearProjection::new(xs[1].clone(), Some(xs[2].clone()))?;
            let y = q.forward(&xs[0])?;
            Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };
        let rep = grad_check(
            f,
            &[x, p.weight.clone(), p.bias.clone().unwrap()],
            &[dx, gp.weight, gp.bias.unwrap()],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn axpy_over_parameters() {
        let mut a = LinearProjection::zeros(2, 2, true);
        let mut b = a.clone();
        b.params_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x = 1.0));
        a.axpy(-0.5, &b).unwrap();
        assert!(a.params().iter().all(|(_, t)| t.data().iter().all(|&x| x == -0.5)));
        assert_eq!(a.num_params(), 6);
    }
}
