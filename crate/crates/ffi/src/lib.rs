//! C ABI over `sola-core`.
//!
//! Every function returns a [`SolaStatus`]. On failure the message is kept per thread and
//! can be read with [`sola_last_error_message`]. Models are opaque [`SolaModel`] handles
//! released with [`sola_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sola_core::backbone::{Backbone, BackboneConfig};
use sola_core::range::{effective_radius, stack};
use sola_core::wkv::wkv_scan;
use sola_core::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    ShapeMismatch = 4,
    InvalidArgument = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SolaModel {
    inner: Backbone,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SolaStatus {
    match err {
        Error::Config { .. } | Error::Route { .. } | Error::Json(_) => SolaStatus::InvalidConfig,
        Error::Shape { .. }
        | Error::DataLength { .. }
        | Error::Grid { .. }
        | Error::Resolution { .. }
        | Error::Merge { .. }
        | Error::EmptyAxis { .. } => SolaStatus::ShapeMismatch,
        Error::NonFinite | Error::DegenerateKernel { .. } | Error::Degenerate(_) | Error::Fit(_) => {
            SolaStatus::Numerical
        }
        Error::Io(_) | Error::Csv(_) => SolaStatus::Io,
        _ => SolaStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SolaStatus, String)>) -> SolaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SolaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sola".to_string());
            SolaStatus::Panic
        }
    }
}

fn core<T>(r: sola_core::Result<T>) -> Result<T, (SolaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SolaStatus, String) {
    (SolaStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SolaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SolaStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SolaModel) -> Result<&'a SolaModel, (SolaStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), (SolaStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn build_into(cfg: sola_core::Result<BackboneConfig>, seed: u64, out: *mut *mut SolaModel) -> SolaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = core(cfg.and_then(|c| Backbone::build(&c, seed)))?;
        out.write(Box::into_raw(Box::new(SolaModel { inner })));
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn sola_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a seeded model from a preset name (`sola_t`, `sola_s`, `sola_b`, `micro`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sola_model_from_preset(name: *const c_char, seed: u64, out: *mut *mut SolaModel) -> SolaStatus {
    let name = match read_str(name, "name") {
        Ok(n) => n,
        Err(e) => return guard(|| Err(e)),
    };
    build_into(BackboneConfig::preset(name), seed, out)
}

/// Builds a seeded model from a JSON config document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sola_model_from_json(json: *const c_char, seed: u64, out: *mut *mut SolaModel) -> SolaStatus {
    let json = match read_str(json, "json") {
        Ok(j) => j,
        Err(e) => return guard(|| Err(e)),
    };
    build_into(BackboneConfig::from_json(json), seed, out)
}

/// # Safety
/// `model` must come from a constructor above and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sola_model_free(model: *mut SolaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sola_model_param_count(model: *const SolaModel, out: *mut usize) -> SolaStatus {
    guard(|| write_out(out, model_ref(model)?.inner.count_params(), "out"))
}

/// Length of the pooled feature returned by [`sola_model_forward`].
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sola_model_output_dim(model: *const SolaModel, out: *mut usize) -> SolaStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_out(out, *m.inner.config.stage_dims.last().unwrap_or(&0), "out")
    })
}

/// Analytic FLOPs for a square input of side `resolution`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sola_model_flops(model: *const SolaModel, resolution: usize, out: *mut u64) -> SolaStatus {
    guard(|| {
        let flops = core(model_ref(model)?.inner.count_flops(resolution))?;
        write_out(out, flops, "out")
    })
}

/// Forward pass on a `resolution × resolution × 3` row-major image; writes the pooled feature.
///
/// # Safety
/// `image` must hold `resolution * resolution * 3` doubles and `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sola_model_forward(
    model: *const SolaModel,
    image: *const f64,
    resolution: usize,
    out: *mut f64,
    out_len: usize,
) -> SolaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if image.is_null() {
            return Err(null("image"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dim = *m.inner.config.stage_dims.last().unwrap_or(&0);
        if out_len != dim {
            return Err((
                SolaStatus::ShapeMismatch,
                format!("output buffer holds {out_len} values, model produces {dim}"),
            ));
        }
        let n = resolution * resolution * 3;
        let pixels = std::slice::from_raw_parts(image, n).to_vec();
        let img = core(Tensor::new(vec![resolution, resolution, 3], pixels))?;
        let pooled = core(m.inner.forward(&img))?.pooled;
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(pooled.data());
        Ok(())
    })
}

/// Bidirectional decay-weighted average over `n` tokens of width `d`.
///
/// # Safety
/// `k`, `v` and `out` must hold `n * d` doubles; `w` and `u` must hold `d`.
#[no_mangle]
pub unsafe extern "C" fn sola_wkv_scan(
    k: *const f64,
    v: *const f64,
    w: *const f64,
    u: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> SolaStatus {
    guard(|| {
        for (p, name) in [(k, "k"), (v, "v"), (w, "w"), (u, "u")] {
            if p.is_null() {
                return Err(null(name));
            }
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let load = |p: *const f64, shape: Vec<usize>| {
            let len = shape.iter().product();
            core(Tensor::new(shape, std::slice::from_raw_parts(p, len).to_vec()))
        };
        let y = core(wkv_scan(
            &load(k, vec![n, d])?,
            &load(v, vec![n, d])?,
            &load(w, vec![d])?,
            &load(u, vec![d])?,
        ))?;
        std::slice::from_raw_parts_mut(out, n * d).copy_from_slice(y.data());
        Ok(())
    })
}

/// Effective radius of `depth` stacked exponential kernels of rate `w` at threshold `epsilon`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sola_effective_range(w: f64, epsilon: f64, depth: usize, out: *mut usize) -> SolaStatus {
    guard(|| {
        let kernel = core(stack(&vec![w; depth]))?;
        let radius = core(effective_radius(&kernel, epsilon))?;
        write_out(out, radius, "out")
    })
}
