//! Patch stem with positional embedding, and 2×2 patch merging.

use rand::Rng;

use crate::backbone::config::IMAGE_CHANNELS;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::numerics::linear::prefixed;
use crate::numerics::ops::{layer_norm_backward, layer_norm_cached, LAYER_NORM_EPS};
use crate::numerics::{LinearProjection, NormParams, Parameters, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams {
    pub patch_size: usize,
    pub proj: LinearProjection,
    /// `G × G × D` table, resized bilinearly to the token grid.
    pub pos: Tensor,
}

impl PatchEmbedParams {
    pub fn init<R: Rng + ?Sized>(patch_size: usize, dim: usize, pos_grid: usize, rng: &mut R) -> Self {
        let fan_in = patch_size * patch_size * IMAGE_CHANNELS;
        Self {
            patch_size,
            proj: LinearProjection::init(fan_in, dim, true, rng),
            pos: Tensor::randn(vec![pos_grid, pos_grid, dim], 0.02, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.out_dim()
    }
}

impl Parameters for PatchEmbedParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("proj", self.proj.params());
        v.push(("pos".into(), &self.pos));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.proj.params_mut();
        v.push(&mut self.pos);
        v
    }
}

/// Half-pixel bilinear taps: for each output index, `(lo, hi, frac)` into the source axis.
fn interp_taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinearly resizes an `G_h × G_w × D` table to `h·w × D` rows.
pub fn resize_bilinear(table: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw, d) = table_dims(table)?;
    if gh == h && gw == w {
        return table.reshape(vec![h * w, d]);
    }
    let (ty, tx) = (interp_taps(h, gh), interp_taps(w, gw));
    let src = table.data();
    let mut out = Tensor::zeros(vec![h * w, d]);
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
            let row = out.row_mut(i * w + j);
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let base = (y * gw + x) * d;
                    let c = wy * wx;
                    for (o, s) in row.iter_mut().zip(&src[base..base + d]) {
                        *o += c * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(table_shape: &[usize], h: usize, w: usize, g: &Tensor) -> Result<Tensor> {
    let probe = Tensor::zeros(table_shape.to_vec());
    let (gh, gw, d) = table_dims(&probe)?;
    g.expect_shape(&[h * w, d], "resize_bilinear_backward")?;
    if gh == h && gw == w {
        return g.reshape(table_shape.to_vec());
    }
    let (ty, tx) = (interp_taps(h, gh), interp_taps(w, gw));
    let mut out = probe;
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
            let grow = g.row(i * w + j);
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let base = (y * gw + x) * d;
                    let c = wy * wx;
                    for (o, s) in out.data_mut()[base..base + d].iter_mut().zip(grow) {
                        *o += c * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn table_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [gh, gw, d] if gh > 0 && gw > 0 => Ok((gh, gw, d)),
        _ => Err(Error::shape("positional table", t.shape(), &[0, 0, 0])),
    }
}

/// Flattens non-overlapping `p × p` patches of an `H × W × 3` image into rows.
pub fn patchify(image: &Tensor, p: usize) -> Result<(Tensor, usize, usize)> {
    let (h, w) = match *image.shape() {
        [h, w, c] if c == IMAGE_CHANNELS => (h, w),
        _ => return Err(Error::shape("patchify", image.shape(), &[0, 0, IMAGE_CHANNELS])),
    };
    if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Resolution {
            height: h,
            width: w,
            divisor: p,
        });
    }
    let (gh, gw) = (h / p, w / p);
    let width = p * p * IMAGE_CHANNELS;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for i in 0..gh {
        for j in 0..gw {
            for dy in 0..p {
                let start = ((i * p + dy) * w + j * p) * IMAGE_CHANNELS;
                out.extend_from_slice(&src[start..start + p * IMAGE_CHANNELS]);
            }
        }
    }
    Ok((Tensor::new(vec![gh * gw, width], out)?, gh, gw))
}

pub fn patch_embed(image: &Tensor, p: &PatchEmbedParams) -> Result<TokenGrid> {
    Ok(patch_embed_vjp(image, p)?.0)
}

type EmbedPullback<'a> = Box<dyn FnOnce(&Tensor) -> Result<PatchEmbedParams> + 'a>;

pub fn patch_embed_vjp<'a>(image: &Tensor, p: &'a PatchEmbedParams) -> Result<(TokenGrid, EmbedPullback<'a>)> {
    let (patches, gh, gw) = patchify(image, p.patch_size)?;
    let mut tokens = p.proj.forward(&patches)?;
    tokens.axpy(1.0, &resize_bilinear(&p.pos, gh, gw)?)?;
    let grid = TokenGrid::new(tokens, gh, gw)?;
    let pullback = Box::new(move |g: &Tensor| {
        let (_, g_proj) = p.proj.backward(&patches, g)?;
        Ok(PatchEmbedParams {
            patch_size: p.patch_size,
            proj: g_proj,
            pos: resize_bilinear_backward(p.pos.shape(), gh, gw, g)?,
        })
    });
    Ok((grid, pullback))
}

/// Concatenated 2×2 neighbourhood → layer norm → bias-free projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeParams {
    pub norm: NormParams,
    pub proj: LinearProjection,
}

impl MergeParams {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            norm: NormParams::new(4 * in_dim),
            proj: LinearProjection::init(4 * in_dim, out_dim, false, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.proj.in_dim() / 4
    }
}

impl Parameters for MergeParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("norm", self.norm.params());
        v.extend(prefixed("proj", self.proj.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.norm.params_mut();
        v.extend(self.proj.params_mut());
        v
    }
}

/// Source token of each 2×2 slot, in order `(0,0) (1,0) (0,1) (1,1)`; `None` past an odd edge.
fn merge_sources(h: usize, w: usize) -> (usize, usize, Vec<[Option<usize>; 4]>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut src = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let at = |r: usize, c: usize| (r < h && c < w).then_some(r * w + c);
            src.push([
                at(2 * i, 2 * j),
                at(2 * i + 1, 2 * j),
                at(2 * i, 2 * j + 1),
                at(2 * i + 1, 2 * j + 1),
            ]);
        }
    }
    (oh, ow, src)
}

/// Strict merge: both extents must be even.
pub fn patch_merge(x: &TokenGrid, p: &MergeParams) -> Result<TokenGrid> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(Error::Merge {
            height: x.height,
            width: x.width,
        });
    }
    Ok(patch_merge_vjp(x, p)?.0)
}

type MergePullback<'a> = Box<dyn FnOnce(&Tensor) -> Result<(Tensor, MergeParams)> + 'a>;

/// Merge that zero-pads an odd extent by one row or column.
pub fn patch_merge_vjp<'a>(x: &TokenGrid, p: &'a MergeParams) -> Result<(TokenGrid, MergePullback<'a>)> {
    let c = x.dim();
    if p.in_dim() != c {
        return Err(Error::shape("patch_merge", &[c], &[p.in_dim()]));
    }
    let (oh, ow, sources) = merge_sources(x.height, x.width);
    let mut cat = Tensor::zeros(vec![oh * ow, 4 * c]);
    for (o, slots) in sources.iter().enumerate() {
        let row = cat.row_mut(o);
        for (s, src) in slots.iter().enumerate() {
            if let Some(t) = *src {
                row[s * c..(s + 1) * c].copy_from_slice(x.tokens.row(t));
            }
        }
    }
    let (ln, cache) = layer_norm_cached(&cat, &p.norm.gain, &p.norm.shift, LAYER_NORM_EPS)?;
    let y = TokenGrid::new(p.proj.forward(&ln)?, oh, ow)?;
    let n_in = x.len();
    let pullback = Box::new(move |g: &Tensor| {
        let (d_ln, g_proj) = p.proj.backward(&ln, g)?;
        let (d_cat, g_gain, g_shift) = layer_norm_backward(&cache, &p.norm.gain, &d_ln)?;
        let mut dx = Tensor::zeros(vec![n_in, c]);
        for (o, slots) in sources.iter().enumerate() {
            for (s, src) in slots.iter().enumerate() {
                if let Some(t) = *src {
                    dx.row_mut(t).copy_from_slice(&d_cat.row(o)[s * c..(s + 1) * c]);
                }
            }
        }
        Ok((
            dx,
            MergeParams {
                norm: NormParams {
                    gain: g_gain,
                    shift: g_shift,
                },
                proj: g_proj,
            },
        ))
    });
    Ok((y, pullback))
}
