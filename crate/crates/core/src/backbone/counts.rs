//! Analytic parameter and FLOP accounting.
//!
//! FLOPs follow the common multiply-accumulate convention: one fused
//! multiply-add counts once. Layer norms count one per element, the WKV scan
//! counts its per-step recurrence operations, and pointwise activations and
//! gates are free.

use serde::Serialize;

use crate::backbone::config::{BackboneConfig, LayerKind, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::wkv::scan_op_count;

pub fn norm_flops(n: usize, d: usize) -> u64 {
    (n * d) as u64
}

/// One WKV layer: spatial mix (four projections plus the scan) and channel mix.
pub fn linear_layer_flops(n: usize, d: usize, channel_mix_ratio: usize) -> u64 {
    let (n, d64, hid) = (n as u64, d as u64, (channel_mix_ratio * d) as u64);
    let spatial = 4 * n * d64 * d64 + scan_op_count(n as usize, d);
    let channel = n * d64 * d64 + 2 * n * d64 * hid;
    2 * norm_flops(n as usize, d) + spatial + channel
}

/// Attention matrix products `QKᵀ` and `AV` for all heads together.
pub fn attention_matrix_flops(n: usize, d: usize) -> u64 {
    2 * (n as u64) * (n as u64) * d as u64
}

/// One softmax layer: QKV and output projections, attention, and the conv MLP.
pub fn softmax_layer_flops(n: usize, d: usize, mlp_ratio: usize) -> u64 {
    let (n64, d64, hid) = (n as u64, d as u64, (mlp_ratio * d) as u64);
    let attn = 4 * n64 * d64 * d64 + attention_matrix_flops(n, d);
    let mlp = 2 * n64 * d64 * hid + 9 * n64 * hid;
    2 * norm_flops(n, d) + attn + mlp
}

pub fn stem_flops(n: usize, patch_size: usize, d: usize) -> u64 {
    (n * patch_size * patch_size * IMAGE_CHANNELS * d) as u64
}

pub fn merge_flops(n_out: usize, c_in: usize, c_out: usize) -> u64 {
    norm_flops(n_out, 4 * c_in) + (n_out * 4 * c_in * c_out) as u64
}

pub fn bridge_flops(t_dst: usize, c_src: usize, c_dst: usize) -> u64 {
    (t_dst * c_src * c_dst + t_dst * c_dst * c_dst) as u64
}

pub fn layer_flops(cfg: &BackboneConfig, kind: LayerKind, n: usize, d: usize) -> u64 {
    match kind {
        LayerKind::Linear => linear_layer_flops(n, d, cfg.channel_mix_ratio),
        LayerKind::Softmax => softmax_layer_flops(n, d, cfg.mlp_ratio),
    }
}

/// Token grid side lengths per stage for an `h × w` image; odd extents round up.
pub fn stage_grids(cfg: &BackboneConfig, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    let p = cfg.patch_size;
    if h == 0 || w == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Resolution {
            height: h,
            width: w,
            divisor: p,
        });
    }
    let mut grids = vec![(h / p, w / p)];
    for _ in 1..cfg.stage_dims.len() {
        let (gh, gw) = *grids.last().unwrap();
        grids.push((gh.div_ceil(2), gw.div_ceil(2)));
    }
    Ok(grids)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlopBreakdown {
    pub stem: u64,
    pub merges: u64,
    pub bridges: u64,
    /// Per layer in network order.
    pub layers: Vec<u64>,
    pub linear_layers: u64,
    pub softmax_layers: u64,
    pub total: u64,
}

pub fn flop_breakdown(cfg: &BackboneConfig, h: usize, w: usize) -> Result<FlopBreakdown> {
    cfg.validate()?;
    let grids = stage_grids(cfg, h, w)?;
    let mut b = FlopBreakdown {
        stem: stem_flops(grids[0].0 * grids[0].1, cfg.patch_size, cfg.stem_dim),
        ..Default::default()
    };
    for (s, &(gh, gw)) in grids.iter().enumerate() {
        let n = gh * gw;
        let d = cfg.stage_dims[s];
        if s > 0 {
            b.merges += merge_flops(n, cfg.stage_dims[s - 1], d);
        }
        for kind in cfg.stage_kinds(s) {
            let f = layer_flops(cfg, kind, n, d);
            match kind {
                LayerKind::Linear => b.linear_layers += f,
                LayerKind::Softmax => b.softmax_layers += f,
            }
            b.layers.push(f);
        }
    }
    for r in &cfg.hsb_routes {
        let (gh, gw) = grids[r.dst.0 - 1];
        b.bridges += bridge_flops(gh * gw, cfg.stage_dims[r.src.0 - 1], cfg.stage_dims[r.dst.0 - 1]);
    }
    b.total = b.stem + b.merges + b.bridges + b.linear_layers + b.softmax_layers;
    Ok(b)
}

/// Backbone FLOPs for a square `resolution × resolution` image.
pub fn count_flops(cfg: &BackboneConfig, resolution: usize) -> Result<u64> {
    Ok(flop_breakdown(cfg, resolution, resolution)?.total)
}

fn linear_params(i: usize, o: usize, bias: bool) -> usize {
    i * o + if bias { o } else { 0 }
}

pub fn linear_layer_params(d: usize, channel_mix_ratio: usize) -> usize {
    let hid = channel_mix_ratio * d;
    let spatial = 2 * d + 4 * linear_params(d, d, true) + 2 * d;
    let channel = linear_params(d, d, true) + linear_params(d, hid, true) + linear_params(hid, d, true) + 2 * d;
    spatial + channel
}

pub fn softmax_layer_params(d: usize, mlp_ratio: usize) -> usize {
    let hid = mlp_ratio * d;
    let attn = linear_params(d, 3 * d, true) + linear_params(d, d, true) + 2 * d;
    let mlp = linear_params(d, hid, true) + 9 * hid + hid + linear_params(hid, d, true) + 2 * d;
    attn + mlp
}

/// Backbone parameters from the config alone; agrees with a built model.
pub fn count_params(cfg: &BackboneConfig) -> Result<usize> {
    cfg.validate()?;
    let p = cfg.patch_size;
    let mut total = linear_params(p * p * IMAGE_CHANNELS, cfg.stem_dim, true) + cfg.pos_grid * cfg.pos_grid * cfg.stem_dim;
    for s in 0..cfg.stage_dims.len() {
        let d = cfg.stage_dims[s];
        if s > 0 {
            let c = cfg.stage_dims[s - 1];
            total += 2 * 4 * c + linear_params(4 * c, d, false);
        }
        for kind in cfg.stage_kinds(s) {
            total += match kind {
                LayerKind::Linear => linear_layer_params(d, cfg.channel_mix_ratio),
                LayerKind::Softmax => softmax_layer_params(d, cfg.mlp_ratio),
            };
        }
    }
    for r in &cfg.hsb_routes {
        let (cs, cd) = (cfg.stage_dims[r.src.0 - 1], cfg.stage_dims[r.dst.0 - 1]);
        total += cs * cd + cd * cd;
    }
    Ok(total)
}

/// Final layer norm plus a linear classifier over the pooled feature.
pub fn classifier_params(cfg: &BackboneConfig, classes: usize) -> usize {
    let c = *cfg.stage_dims.last().unwrap_or(&0);
    2 * c + linear_params(c, classes, true)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub variant: String,
    pub resolution: usize,
    pub tokens: usize,
    pub flops: u64,
}

/// FLOPs over resolutions for one config.
pub fn flop_curve(cfg: &BackboneConfig, resolutions: &[usize]) -> Result<Vec<CurvePoint>> {
    resolutions
        .iter()
        .map(|&r| {
            let g = stage_grids(cfg, r, r)?;
            Ok(CurvePoint {
                variant: cfg.name.clone(),
                resolution: r,
                tokens: g[0].0 * g[0].1,
                flops: count_flops(cfg, r)?,
            })
        })
        .collect()
}

/// Curves for the config and for its all-softmax variant.
pub fn scaling_curve(cfg: &BackboneConfig, resolutions: &[usize]) -> Result<Vec<CurvePoint>> {
    let mut rows = flop_curve(cfg, resolutions)?;
    rows.extend(flop_curve(&cfg.uniform_variant(LayerKind::Softmax), resolutions)?);
    Ok(rows)
}

/// Least-squares slope of `log flops` against `log tokens`.
pub fn growth_exponent(points: &[CurvePoint]) -> Result<f64> {
    let x: Vec<f64> = points.iter().map(|p| p.tokens as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.flops as f64).collect();
    Ok(crate::range::fit_power_law(&x, &y)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> BackboneConfig {
        BackboneConfig::preset(name).unwrap()
    }

    #[test]
    fn linear_layers_scale_exactly_with_tokens() {
        let cfg = preset("sola_t");
        let a = flop_breakdown(&cfg, 224, 224).unwrap();
        let b = flop_breakdown(&cfg, 448, 448).unwrap();
        assert_eq!(b.linear_layers, 4 * a.linear_layers);
        assert!(b.softmax_layers > 4 * a.softmax_layers);
    }

    #[test]
    fn pure_linear_model_is_exactly_linear_in_tokens() {
        let cfg = preset("sola_t").uniform_variant(LayerKind::Linear);
        let base = count_flops(&cfg, 224).unwrap();
        for k in [2, 4] {
            assert_eq!(count_flops(&cfg, 224 * k).unwrap(), (k * k) as u64 * base);
        }
    }

    #[test]
    fn params_do_not_depend_on_resolution_and_breakdown_sums() {
        let cfg = preset("sola_t");
        let b = flop_breakdown(&cfg, 224, 224).unwrap();
        assert_eq!(b.layers.iter().sum::<u64>(), b.linear_layers + b.softmax_layers);
        assert_eq!(b.layers.len(), cfg.num_layers());
    }

    #[test]
    fn stage_grids_round_up() {
        let cfg = preset("sola_t");
        assert_eq!(
            stage_grids(&cfg, 224, 224).unwrap(),
            vec![(56, 56), (28, 28), (14, 14), (7, 7)]
        );
        assert_eq!(
            stage_grids(&cfg, 16, 16).unwrap(),
            vec![(4, 4), (2, 2), (1, 1), (1, 1)]
        );
        assert!(matches!(stage_grids(&cfg, 222, 224), Err(Error::Resolution { .. })));
    }

    #[test]
    fn curve_rows_and_monotonicity() {
        let cfg = preset("sola_t");
        let rows = scaling_curve(&cfg, &[224, 448, 896]).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[..3].windows(2).all(|w| w[0].flops < w[1].flops));
    }
}
