use std::ffi::{CStr, CString};
use std::ptr;

use sola_core::backbone::{count_flops, count_params, Backbone, BackboneConfig};
use sola_core::Tensor;
use sola_ffi::*;

fn last_error() -> String {
    let p = sola_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn micro() -> *mut SolaModel {
    let name = CString::new("micro").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sola_model_from_preset(name.as_ptr(), 3, &mut m) }, SolaStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn counts_match_core() {
    let m = micro();
    let cfg = BackboneConfig::preset("micro").unwrap();
    let (mut params, mut flops, mut dim) = (0usize, 0u64, 0usize);
    unsafe {
        assert_eq!(sola_model_param_count(m, &mut params), SolaStatus::Ok);
        assert_eq!(sola_model_flops(m, 64, &mut flops), SolaStatus::Ok);
        assert_eq!(sola_model_output_dim(m, &mut dim), SolaStatus::Ok);
        sola_model_free(m);
    }
    assert_eq!(params, count_params(&cfg).unwrap());
    assert_eq!(flops, count_flops(&cfg, 64).unwrap());
    assert_eq!(dim, *cfg.stage_dims.last().unwrap());
}

#[test]
fn forward_matches_core() {
    let m = micro();
    let res = 32;
    let image: Vec<f64> = (0..res * res * 3).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
    let mut dim = 0usize;
    unsafe { sola_model_output_dim(m, &mut dim) };
    let mut out = vec![0.0; dim];
    let status = unsafe { sola_model_forward(m, image.as_ptr(), res, out.as_mut_ptr(), dim) };
    assert_eq!(status, SolaStatus::Ok);

    let wrong = unsafe { sola_model_forward(m, image.as_ptr(), res, out.as_mut_ptr(), dim + 1) };
    assert_eq!(wrong, SolaStatus::ShapeMismatch);
    assert!(last_error().contains("output buffer"));

    let bad_res = unsafe { sola_model_forward(m, image.as_ptr(), 6, out.as_mut_ptr(), dim) };
    assert_eq!(bad_res, SolaStatus::ShapeMismatch);
    unsafe { sola_model_free(m) };

    let model = Backbone::build(&BackboneConfig::preset("micro").unwrap(), 3).unwrap();
    let expected = model.forward(&Tensor::new(vec![res, res, 3], image).unwrap()).unwrap().pooled;
    assert_eq!(out, expected.data());
}

#[test]
fn json_config_round_trip_and_errors() {
    let cfg = BackboneConfig::preset("micro").unwrap();
    let json = CString::new(cfg.to_json().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sola_model_from_json(json.as_ptr(), 0, &mut m) }, SolaStatus::Ok);
    unsafe { sola_model_free(m) };

    let bad = CString::new(r#"{"patch_size": 4}"#).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sola_model_from_json(bad.as_ptr(), 0, &mut m) }, SolaStatus::InvalidConfig);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    let unknown = CString::new("sola_xl").unwrap();
    assert_eq!(
        unsafe { sola_model_from_preset(unknown.as_ptr(), 0, &mut m) },
        SolaStatus::InvalidConfig
    );
    assert!(last_error().contains("sola_xl"));

    let invalid_utf8 = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { sola_model_from_preset(invalid_utf8.as_ptr().cast(), 0, &mut m) },
        SolaStatus::InvalidUtf8
    );
}

#[test]
fn null_pointers_are_reported() {
    let mut n = 0usize;
    unsafe {
        assert_eq!(sola_model_param_count(ptr::null(), &mut n), SolaStatus::NullPointer);
        assert!(last_error().contains("model"));
        assert_eq!(sola_model_from_preset(ptr::null(), 0, &mut ptr::null_mut()), SolaStatus::NullPointer);
        let name = CString::new("micro").unwrap();
        assert_eq!(sola_model_from_preset(name.as_ptr(), 0, ptr::null_mut()), SolaStatus::NullPointer);
        sola_model_free(ptr::null_mut());
    }
    let m = micro();
    assert!(sola_last_error_message().is_null());
    unsafe { sola_model_free(m) };
}

#[test]
fn wkv_scan_matches_core() {
    let (n, d) = (7, 3);
    let k: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.7).sin()).collect();
    let v: Vec<f64> = (0..n * d).map(|i| (i as f64 * 1.3).cos()).collect();
    let w = vec![0.5, 2.0, 8.0];
    let u = vec![0.0, -1.0, 0.3];
    let mut out = vec![0.0; n * d];
    let status = unsafe { sola_wkv_scan(k.as_ptr(), v.as_ptr(), w.as_ptr(), u.as_ptr(), n, d, out.as_mut_ptr()) };
    assert_eq!(status, SolaStatus::Ok);
    let t = |s: Vec<usize>, x: &[f64]| Tensor::new(s, x.to_vec()).unwrap();
    let expected = sola_core::wkv::wkv_naive(&t(vec![n, d], &k), &t(vec![n, d], &v), &t(vec![d], &w), &t(vec![d], &u))
        .unwrap();
    for (a, b) in out.iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    let status = unsafe { sola_wkv_scan(k.as_ptr(), ptr::null(), w.as_ptr(), u.as_ptr(), n, d, out.as_mut_ptr()) };
    assert_eq!(status, SolaStatus::NullPointer);
}

#[test]
fn effective_range_single_layer() {
    let mut r = 0usize;
    assert_eq!(unsafe { sola_effective_range(1.0, 1e-3, 1, &mut r) }, SolaStatus::Ok);
    assert_eq!(r, 7);
    let mut deep = 0usize;
    assert_eq!(unsafe { sola_effective_range(1.0, 1e-3, 16, &mut deep) }, SolaStatus::Ok);
    assert!(deep > r);
    assert_ne!(unsafe { sola_effective_range(1.0, 2.0, 4, &mut r) }, SolaStatus::Ok);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sola.h")).unwrap();
    for sym in [
        "typedef struct SolaModel SolaModel;",
        "SOLA_STATUS_OK = 0",
        "sola_last_error_message",
        "sola_model_from_preset",
        "sola_model_from_json",
        "sola_model_free",
        "sola_model_param_count",
        "sola_model_output_dim",
        "sola_model_flops",
        "sola_model_forward",
        "sola_wkv_scan",
        "sola_effective_range",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}
