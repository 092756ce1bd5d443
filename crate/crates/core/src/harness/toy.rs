//! Two-class blob-counting task and a plain gradient-descent trainer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::numerics::linear::prefixed;
use crate::numerics::ops::softmax_rows;
use crate::numerics::{LinearProjection, Parameters, Tensor};

pub const TOY_SIDE: usize = 32;
pub const MIN_BLOB_DISTANCE: f64 = 16.0;
pub const MAX_TOY_PARAMS: usize = 500_000;
const BLOB_SIGMA: f64 = 2.0;

/// Class 0 images hold one bright blob, class 1 images hold two blobs at least 16 px apart.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Blob centers per image, `(row, col)`.
    pub centers: Vec<Vec<(f64, f64)>>,
}

fn render(centers: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Tensor {
    let color: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
    let mut img = Tensor::zeros(vec![TOY_SIDE, TOY_SIDE, 3]);
    for r in 0..TOY_SIDE {
        for c in 0..TOY_SIDE {
            let v: f64 = centers
                .iter()
                .map(|&(cy, cx)| {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
                })
                .sum();
            for (ch, &k) in color.iter().enumerate() {
                img.data_mut()[(r * TOY_SIDE + c) * 3 + ch] = k * v;
            }
        }
    }
    img
}

/// Shifts and scales all pixels to zero mean and unit variance over the set.
fn standardize(images: &mut [Tensor]) {
    let count = images.iter().map(|i| i.len()).sum::<usize>() as f64;
    let mean = images.iter().map(|i| i.sum()).sum::<f64>() / count;
    let var = images
        .iter()
        .flat_map(|i| i.data().iter())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / count;
    let inv = 1.0 / var.sqrt().max(f64::MIN_POSITIVE);
    for img in images {
        img.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
}

impl ToyTask {
    /// `n` images with exactly `n / 2` of each class (`n` must be even).
    pub fn generate(n: usize, seed: u64) -> Result<Self> {
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::param("samples", format!("need a positive even count, got {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        let margin = 3.0 * BLOB_SIGMA;
        let hi = TOY_SIDE as f64 - margin;
        let mut images = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        for &label in &labels {
            let pick = |rng: &mut ChaCha8Rng| (rng.gen_range(margin..hi), rng.gen_range(margin..hi));
            let c = if label == 0 {
                vec![pick(&mut rng)]
            } else {
                loop {
                    let (a, b) = (pick(&mut rng), pick(&mut rng));
                    if ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= MIN_BLOB_DISTANCE {
                        break vec![a, b];
                    }
                }
            };
            images.push(render(&c, &mut rng));
            centers.push(c);
        }
        standardize(&mut images);
        Ok(Self {
            images,
            labels,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Backbone plus a linear head on the pooled feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: LinearProjection,
}

impl Parameters for Classifier {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("backbone", self.backbone.params());
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

impl Classifier {
    pub fn build(cfg: &BackboneConfig, classes: usize, seed: u64) -> Result<Self> {
        let backbone = Backbone::build(cfg, seed)?;
        let dim = *cfg.stage_dims.last().unwrap_or(&0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self {
            backbone,
            head: LinearProjection::init(dim, classes, true, &mut rng),
        })
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let pooled = self.backbone.forward(image)?.pooled;
        self.head.forward(&pooled.into_shape(vec![1, self.head.in_dim()])?)
    }

    /// Mean cross-entropy, accuracy and gradient over a batch.
    pub fn loss_and_grad(&self, images: &[Tensor], labels: &[usize]) -> Result<(f64, f64, Classifier)> {
        let mut grad = self.zeroed();
        let (mut loss, mut correct) = (0.0, 0);
        let scale = 1.0 / images.len() as f64;
        for (img, &label) in images.iter().zip(labels) {
            let (trace, pullback) = self.backbone.forward_vjp(img)?;
            let pooled = trace.pooled.into_shape(vec![1, self.head.in_dim()])?;
            let logits = self.head.forward(&pooled)?;
            let probs = softmax_rows(&logits);
            let p = probs.data();
            loss -= p[label].max(f64::MIN_POSITIVE).ln() * scale;
            let predicted = (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best });
            correct += usize::from(predicted == label);
            let d_logits = Tensor::from_fn(vec![1, p.len()], |i| (p[i] - f64::from(u8::from(i == label))) * scale);
            let (d_pooled, g_head) = self.head.backward(&pooled, &d_logits)?;
            let g_backbone = pullback(&d_pooled.into_shape(vec![self.head.in_dim()])?)?;
            grad.head.axpy(1.0, &g_head)?;
            grad.backbone.axpy(1.0, &g_backbone)?;
        }
        Ok((loss, correct as f64 / images.len() as f64, grad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainResult {
    pub params: usize,
    /// Full-batch loss before each step, then after the last step.
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
}

impl TrainResult {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub samples: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            seed: 0,
            samples: 16,
        }
    }
}

/// Full-batch gradient descent with a fixed learning rate.
pub fn train_toy(cfg: &BackboneConfig, opts: &TrainOptions) -> Result<TrainResult> {
    let mut model = Classifier::build(cfg, 2, opts.seed)?;
    let params = model.num_params();
    if params > MAX_TOY_PARAMS {
        return Err(Error::config(
            "config",
            format!("desk-scale only: {params} parameters exceed {MAX_TOY_PARAMS}"),
        ));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::param("lr", format!("must be finite and nonnegative, got {}", opts.lr)));
    }
    let task = ToyTask::generate(opts.samples, opts.seed)?;
    let mut losses = Vec::with_capacity(opts.steps + 1);
    let mut accuracy = 0.0;
    for step in 0..=opts.steps {
        let (loss, acc, grad) = model.loss_and_grad(&task.images, &task.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite);
        }
        losses.push(loss);
        accuracy = acc;
        if step < opts.steps {
            model.axpy(-opts.lr, &grad)?;
        }
    }
    Ok(TrainResult {
        params,
        losses,
        final_accuracy: accuracy,
    })
}
