use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::config::{BackboneConfig, LayerKind, LayerRef};
use crate::backbone::counts::{self, bridge_flops, layer_flops, merge_flops, stem_flops};
use crate::backbone::embed::{patch_embed_vjp, patch_merge_vjp, MergeParams, PatchEmbedParams};
use crate::backbone::hsb::{hidden_state_bridge_grid, BridgePullback, HsbParams};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::numerics::linear::prefixed;
use crate::numerics::{Parameters, Tensor};
use crate::softmax_layer::{softmax_layer_vjp, SoftmaxLayerParams};
use crate::wkv::{wkv_layer_vjp, BlockPullback, WkvLayerParams};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Linear(WkvLayerParams),
    Softmax(SoftmaxLayerParams),
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            Self::Linear(_) => LayerKind::Linear,
            Self::Softmax(_) => LayerKind::Softmax,
        }
    }
}

impl Parameters for LayerParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Self::Linear(p) => p.params(),
            Self::Softmax(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Linear(p) => p.params_mut(),
            Self::Softmax(p) => p.params_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    /// Absent for the first stage.
    pub merge: Option<MergeParams>,
    pub layers: Vec<LayerParams>,
}

/// A built backbone; gradients are returned as a value of the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: PatchEmbedParams,
    pub stages: Vec<StageParams>,
    /// One per configured route, in config order.
    pub bridges: Vec<HsbParams>,
}

impl Parameters for Backbone {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("embed", self.embed.params());
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                v.extend(prefixed(&format!("stage{}.merge", s + 1), m.params()));
            }
            for (l, layer) in stage.layers.iter().enumerate() {
                v.extend(prefixed(&format!("stage{}.layer{}", s + 1, l + 1), layer.params()));
            }
        }
        for (i, b) in self.bridges.iter().enumerate() {
            v.extend(prefixed(&format!("bridge{i}"), b.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embed.params_mut();
        for stage in &mut self.stages {
            if let Some(m) = &mut stage.merge {
                v.extend(m.params_mut());
            }
            for layer in &mut stage.layers {
                v.extend(layer.params_mut());
            }
        }
        for b in &mut self.bridges {
            v.extend(b.params_mut());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerTrace {
    pub stage: usize,
    pub layer: usize,
    pub kind: LayerKind,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BridgeTrace {
    pub src: LayerRef,
    pub dst: LayerRef,
    /// `[tokens, channels]` of the tapped source state.
    pub src_shape: [usize; 2],
    /// `[tokens, channels]` of the projected sample.
    pub bridge_shape: [usize; 2],
    pub flops: u64,
}

/// Everything observable from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stem: [usize; 3],
    pub stem_flops: u64,
    /// `[height, width, dim]` at the end of each stage.
    pub stage_shapes: Vec<[usize; 3]>,
    pub merge_flops: u64,
    pub layers: Vec<LayerTrace>,
    pub bridges: Vec<BridgeTrace>,
    /// WKV states of bridge source layers.
    pub taps: BTreeMap<LayerRef, TokenGrid>,
    pub output: TokenGrid,
    /// Mean over the final tokens.
    pub pooled: Tensor,
}

impl ForwardTrace {
    pub fn total_flops(&self) -> u64 {
        self.stem_flops
            + self.merge_flops
            + self.layers.iter().map(|l| l.flops).sum::<u64>()
            + self.bridges.iter().map(|b| b.flops).sum::<u64>()
    }

    pub fn layer_kinds(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.stage_shapes.len()];
        for l in &self.layers {
            out[l.stage - 1].push(l.kind.as_char());
        }
        out
    }

    pub fn report(&self) -> TraceReport {
        TraceReport {
            stem: self.stem,
            stage_shapes: self.stage_shapes.clone(),
            layers: self.layers.clone(),
            bridges: self.bridges.clone(),
            taps: self
                .taps
                .iter()
                .map(|(&at, g)| TapShape {
                    at,
                    shape: [g.height, g.width, g.dim()],
                })
                .collect(),
            pooled: self.pooled.data().to_vec(),
            total_flops: self.total_flops(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TapShape {
    pub at: LayerRef,
    pub shape: [usize; 3],
}

/// Tensor-free, serializable view of a [`ForwardTrace`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceReport {
    pub stem: [usize; 3],
    pub stage_shapes: Vec<[usize; 3]>,
    pub layers: Vec<LayerTrace>,
    pub bridges: Vec<BridgeTrace>,
    pub taps: Vec<TapShape>,
    pub pooled: Vec<f64>,
    pub total_flops: u64,
}

enum Step<'a> {
    Embed(Box<dyn FnOnce(&Tensor) -> Result<PatchEmbedParams> + 'a>),
    Merge(usize, Box<dyn FnOnce(&Tensor) -> Result<(Tensor, MergeParams)> + 'a>),
    Bridge(usize, BridgePullback<'a>),
    Layer(LayerRef, BlockPullback<'a, LayerParams>),
}

pub type BackbonePullback<'a> = Box<dyn FnOnce(&Tensor) -> Result<Backbone> + 'a>;

impl Backbone {
    /// Seeded initialization.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = PatchEmbedParams::init(config.patch_size, config.stem_dim, config.pos_grid, &mut rng);
        let mut stages = Vec::with_capacity(config.stage_dims.len());
        for (s, &d) in config.stage_dims.iter().enumerate() {
            let merge = (s > 0).then(|| MergeParams::init(config.stage_dims[s - 1], d, &mut rng));
            let mut layers = Vec::new();
            for kind in config.stage_kinds(s) {
                layers.push(match kind {
                    LayerKind::Linear => LayerParams::Linear(WkvLayerParams::init(d, config.channel_mix_ratio, &mut rng)),
                    LayerKind::Softmax => LayerParams::Softmax(SoftmaxLayerParams::init(
                        d,
                        config.heads(s),
                        config.mlp_ratio,
                        &mut rng,
                    )?),
                });
            }
            stages.push(StageParams { merge, layers });
        }
        let bridges = config
            .hsb_routes
            .iter()
            .map(|r| {
                HsbParams::init(
                    config.stage_dims[r.src.0 - 1],
                    config.stage_dims[r.dst.0 - 1],
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            stages,
            bridges,
        })
    }

    /// Same parameters with every bridge removed.
    pub fn without_routes(&self) -> Self {
        Self {
            config: self.config.without_routes(),
            bridges: Vec::new(),
            ..self.clone()
        }
    }

    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    pub fn count_flops(&self, resolution: usize) -> Result<u64> {
        counts::count_flops(&self.config, resolution)
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        Ok(self.forward_impl(image, false)?.0)
    }

    /// Forward pass plus a pullback from the pooled-feature cotangent to parameter gradients.
    pub fn forward_vjp(&self, image: &Tensor) -> Result<(ForwardTrace, BackbonePullback<'_>)> {
        let (trace, steps) = self.forward_impl(image, true)?;
        let n_out = trace.output.len();
        let dim = trace.output.dim();
        let pullback: BackbonePullback<'_> = Box::new(move |d_pooled: &Tensor| {
            d_pooled.expect_shape(&[dim], "backbone pullback")?;
            let row = d_pooled.scale(1.0 / n_out as f64);
            let mut d = Tensor::from_fn(vec![n_out, dim], |i| row.data()[i % dim]);
            self.backward(steps, &mut d)
        });
        Ok((trace, pullback))
    }

    fn backward(&self, steps: Vec<Step<'_>>, d: &mut Tensor) -> Result<Backbone> {
        let mut grads = self.zeroed();
        let mut tap_grads: BTreeMap<LayerRef, Tensor> = BTreeMap::new();
        for step in steps.into_iter().rev() {
            match step {
                Step::Layer(at, pb) => {
                    let tap = tap_grads.remove(&at);
                    let (dx, g) = pb(d, tap.as_ref())?;
                    *d = dx;
                    grads.stages[at.0 - 1].layers[at.1 - 1] = g;
                }
                Step::Bridge(i, pb) => {
                    let (d_dst, d_src, g) = pb(d)?;
                    *d = d_dst;
                    let src = self.config.hsb_routes[i].src;
                    match tap_grads.get_mut(&src) {
                        Some(acc) => acc.axpy(1.0, &d_src)?,
                        None => {
                            tap_grads.insert(src, d_src);
                        }
                    }
                    grads.bridges[i] = g;
                }
                Step::Merge(s, pb) => {
                    let (dx, g) = pb(d)?;
                    *d = dx;
                    grads.stages[s].merge = Some(g);
                }
                Step::Embed(pb) => grads.embed = pb(d)?,
            }
        }
        Ok(grads)
    }

    fn forward_impl(&self, image: &Tensor, keep: bool) -> Result<(ForwardTrace, Vec<Step<'_>>)> {
        let cfg = &self.config;
        let mut steps = Vec::new();
        let (mut x, embed_pb) = patch_embed_vjp(image, &self.embed)?;
        if keep {
            steps.push(Step::Embed(embed_pb));
        }
        let stem = [x.height, x.width, x.dim()];
        let stem_cost = stem_flops(x.len(), cfg.patch_size, x.dim());
        let mut merge_cost = 0;
        let mut stage_shapes = Vec::new();
        let mut layers = Vec::new();
        let mut bridges = Vec::new();
        let mut taps: BTreeMap<LayerRef, TokenGrid> = BTreeMap::new();

        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                let (y, pb) = patch_merge_vjp(&x, m)?;
                merge_cost += merge_flops(y.len(), x.dim(), y.dim());
                x = y;
                if keep {
                    steps.push(Step::Merge(s, pb));
                }
            }
            for (l, layer) in stage.layers.iter().enumerate() {
                let at = (s + 1, l + 1);
                for (i, route) in cfg.hsb_routes.iter().enumerate().filter(|(_, r)| r.dst == at) {
                    let src = taps.get(&route.src).ok_or_else(|| Error::Route {
                        route: route.to_string(),
                        reason: "source state was not recorded".into(),
                    })?;
                    let out = hidden_state_bridge_grid(src, &x, &self.bridges[i])?;
                    bridges.push(BridgeTrace {
                        src: route.src,
                        dst: route.dst,
                        src_shape: [src.len(), src.dim()],
                        bridge_shape: [out.bridged.rows(), out.bridged.cols()],
                        flops: bridge_flops(x.len(), src.dim(), x.dim()),
                    });
                    x = x.with_tokens(out.fused)?;
                    if keep {
                        steps.push(Step::Bridge(i, out.pullback));
                    }
                }
                let (y, pb): (TokenGrid, BlockPullback<'_, LayerParams>) = match layer {
                    LayerParams::Linear(p) => {
                        let out = wkv_layer_vjp(&x, p)?;
                        if cfg.is_route_source(at) {
                            taps.insert(at, x.with_tokens(out.hidden)?);
                        }
                        let inner = out.pullback;
                        (
                            out.output,
                            Box::new(move |g, tap| inner(g, tap).map(|(dx, gp)| (dx, LayerParams::Linear(gp)))),
                        )
                    }
                    LayerParams::Softmax(p) => {
                        let (y, inner) = softmax_layer_vjp(&x, p)?;
                        (
                            y,
                            Box::new(move |g, tap| inner(g, tap).map(|(dx, gp)| (dx, LayerParams::Softmax(gp)))),
                        )
                    }
                };
                layers.push(LayerTrace {
                    stage: at.0,
                    layer: at.1,
                    kind: layer.kind(),
                    height: x.height,
                    width: x.width,
                    dim: x.dim(),
                    flops: layer_flops(cfg, layer.kind(), x.len(), x.dim()),
                });
                x = y;
                if keep {
                    steps.push(Step::Layer(at, pb));
                }
            }
            stage_shapes.push([x.height, x.width, x.dim()]);
        }
        let pooled = x.tokens.mean_rows();
        Ok((
            ForwardTrace {
                stem,
                stem_flops: stem_cost,
                stage_shapes,
                merge_flops: merge_cost,
                layers,
                bridges,
                taps,
                output: x,
                pooled,
            },
            steps,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::counts::count_params;
    use crate::numerics::grad::{grad_check, GradCheckOptions};

    fn image(side: usize, seed: u64) -> Tensor {
        Tensor::randn(vec![side, side, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn micro() -> BackboneConfig {
        BackboneConfig::preset("micro").unwrap()
    }

    #[test]
    fn micro_shapes_and_pattern_fidelity() {
        let m = Backbone::build(&micro(), 0).unwrap();
        let t = m.forward(&image(32, 1)).unwrap();
        assert_eq!(t.stem, [8, 8, 8]);
        assert_eq!(t.stage_shapes, vec![[8, 8, 8], [4, 4, 8], [2, 2, 16], [1, 1, 16]]);
        assert_eq!(t.layer_kinds(), m.config.patterns);
        let src: Vec<LayerRef> = m.config.hsb_routes.iter().map(|r| r.src).collect();
        assert_eq!(t.taps.keys().copied().collect::<Vec<_>>(), src);
        assert_eq!(t.pooled.shape(), &[16]);
    }

    #[test]
    fn built_and_analytic_counts_agree() {
        for name in ["micro", "sola_t"] {
            let cfg = BackboneConfig::preset(name).unwrap();
            let m = Backbone::build(&cfg, 0).unwrap();
            assert_eq!(m.count_params(), count_params(&cfg).unwrap(), "{name}");
        }
    }

    #[test]
    fn trace_flops_match_analytic_count() {
        let m = Backbone::build(&micro(), 0).unwrap();
        let t = m.forward(&image(64, 2)).unwrap();
        assert_eq!(t.total_flops(), m.count_flops(64).unwrap());
    }

    #[test]
    fn silent_bridges_match_unbridged_model() {
        let mut m = Backbone::build(&micro(), 3).unwrap();
        for b in &mut m.bridges {
            b.proj.weight = Tensor::zeros(b.proj.weight.shape().to_vec());
        }
        let img = image(32, 4);
        let a = m.forward(&img).unwrap();
        let b = m.without_routes().forward(&img).unwrap();
        assert_eq!(a.output.tokens.data(), b.output.tokens.data());
        assert_eq!(a.pooled.data(), b.pooled.data());
    }

    #[test]
    fn smallest_resolution_and_odd_grids_run() {
        let m = Backbone::build(&micro(), 5).unwrap();
        let t = m.forward(&image(16, 6)).unwrap();
        assert_eq!(t.stage_shapes.last().unwrap(), &[1, 1, 16]);
        let t = m.forward(&image(24, 7)).unwrap();
        assert_eq!(t.stage_shapes, vec![[6, 6, 8], [3, 3, 8], [2, 2, 16], [1, 1, 16]]);
        assert!(matches!(m.forward(&image(30, 8)), Err(Error::Resolution { .. })));
    }

    #[test]
    fn pure_linear_schedule_runs() {
        let mut cfg = micro().uniform_variant(LayerKind::Linear);
        cfg.patterns = vec!["LL".into(), "LL".into(), "LLLLLL".into(), "LL".into()];
        let m = Backbone::build(&cfg, 9).unwrap();
        let t = m.forward(&image(32, 10)).unwrap();
        assert!(t.layers.iter().all(|l| l.kind == LayerKind::Linear));
        assert!(t.bridges.is_empty());
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Backbone::build(&micro(), 11).unwrap().forward(&image(32, 12)).unwrap();
        let b = Backbone::build(&micro(), 11).unwrap().forward(&image(32, 12)).unwrap();
        assert_eq!(a.pooled.data(), b.pooled.data());
    }

    #[test]
    fn end_to_end_gradcheck_sampled() {
        let m = Backbone::build(&micro(), 13).unwrap();
        let img = image(32, 14);
        let probe = Tensor::randn(vec![16], 1.0, &mut ChaCha8Rng::seed_from_u64(15));
        let (_, pb) = m.forward_vjp(&img).unwrap();
        let g = pb(&probe).unwrap();
        let inputs: Vec<Tensor> = m.params().into_iter().map(|(_, t)| t.clone()).collect();
        let grads: Vec<Tensor> = g.params().into_iter().map(|(_, t)| t.clone()).collect();
        let opts = GradCheckOptions {
            max_entries: Some(3),
            ..Default::default()
        };
        let rep = grad_check(
            |xs| {
                let mut q = m.clone();
                for (d, s) in q.params_mut().into_iter().zip(xs) {
                    *d = s.clone();
                }
                let t = q.forward(&img)?;
                Ok(t.pooled.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
            },
            &inputs,
            &grads,
            &opts,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-3, "{rep:?}");
    }
}
