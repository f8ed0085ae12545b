use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use marginlab_ffi::*;

fn two_boundary_model() -> *mut MlModel {
    let w1 = [1.0, 0.0, 0.0, -1.0];
    let b1 = [1.0, 1.0];
    let w2 = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let b2 = [0.0, -2.0, -2.5];
    let mut m = ptr::null_mut();
    let s = unsafe { ml_model_from_parts(2, 2, 3, w1.as_ptr(), b1.as_ptr(), w2.as_ptr(), b2.as_ptr(), &mut m) };
    assert_eq!(s, MlStatus::Ok);
    m
}

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    unsafe {
        ml_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn margin_round_trip() {
    let m = two_boundary_model();
    let x = [0.0, 0.0];
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(ml_margin(m, x.as_ptr(), ptr::null(), 2, ptr::null(), &mut r), MlStatus::Ok);
        let (mut margin, mut j, mut i) = (0.0, 0, 9);
        assert_eq!(ml_margin_result_value(r, &mut margin, &mut j, &mut i), MlStatus::Ok);
        assert_eq!((i, j), (0, 1));
        assert!((margin - 1.0).abs() < 1e-6);
        assert_eq!(ml_margin_result_pair_count(r), 2);
        let mut info = std::mem::MaybeUninit::<MlPairInfo>::uninit();
        assert_eq!(ml_margin_result_pair(r, 1, info.as_mut_ptr()), MlStatus::Ok);
        let info = info.assume_init();
        assert_eq!((info.j, info.status, info.dominated_by), (2, MlPairStatus::Valid, -1));
        assert!((info.distance - 1.5).abs() < 1e-6);
        let mut p = [0.0; 2];
        assert_eq!(ml_margin_result_point(r, p.as_mut_ptr(), 2), MlStatus::Ok);
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1].abs() < 1e-6);
        assert!(ml_margin_result_upper_bound(r).is_nan());
        let mut small = [0.0; 1];
        assert_eq!(ml_margin_result_point(r, small.as_mut_ptr(), 1), MlStatus::BufferTooSmall);
        ml_margin_result_free(r);

        let other = [3.0, 0.0];
        let mut d = 0.0;
        assert_eq!(ml_bisection_upper_bound(m, x.as_ptr(), other.as_ptr(), 2, &mut d), MlStatus::Ok);
        assert!((d - 1.0).abs() < 1e-5);
        let mut cfg = std::mem::MaybeUninit::<MlSolverConfig>::uninit();
        assert_eq!(ml_solver_config_default(cfg.as_mut_ptr()), MlStatus::Ok);
        let mut cfg = cfg.assume_init();
        assert_eq!(cfg.validity_threshold, 1e-3);
        assert_eq!(ml_margin(m, x.as_ptr(), other.as_ptr(), 2, &cfg, &mut r), MlStatus::Ok);
        assert!((ml_margin_result_upper_bound(r) - d).abs() < 1e-12);
        ml_margin_result_free(r);
        cfg.penalty_growth = 0.5;
        assert_eq!(ml_margin(m, x.as_ptr(), ptr::null(), 2, &cfg, &mut r), MlStatus::InvalidArgument);
        ml_model_free(m);
    }
}

#[test]
fn model_queries_and_errors() {
    let m = two_boundary_model();
    unsafe {
        let (mut d, mut h, mut c) = (0, 0, 0);
        assert_eq!(ml_model_dims(m, &mut d, &mut h, &mut c), MlStatus::Ok);
        assert_eq!((d, h, c), (2, 2, 3));
        let x = [0.5, 0.0];
        let mut logits = [0.0; 3];
        assert_eq!(ml_model_logits(m, x.as_ptr(), 2, logits.as_mut_ptr(), 3), MlStatus::Ok);
        assert_eq!(logits, [0.0, -0.5, -1.5]);
        let mut g = [0.0; 2];
        assert_eq!(ml_model_input_gradient(m, x.as_ptr(), 2, 0, 1, g.as_mut_ptr(), 2), MlStatus::Ok);
        assert_eq!(g, [-1.0, 0.0]);
        assert_eq!(ml_model_input_gradient(m, x.as_ptr(), 2, 1, 1, g.as_mut_ptr(), 2), MlStatus::InvalidArgument);
        let mut cls = 0;
        assert_eq!(ml_model_predict(m, x.as_ptr(), 3, &mut cls), MlStatus::DimensionMismatch);
        assert!(last_error().contains("expects 2"), "{}", last_error());
        assert_eq!(ml_model_predict(ptr::null(), x.as_ptr(), 2, &mut cls), MlStatus::NullPointer);
        ml_model_free(m);
        ml_model_free(ptr::null_mut());
    }
    let missing = CString::new("/nonexistent/model.mlpm").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ml_model_load(missing.as_ptr(), &mut out) }, MlStatus::Io);
    assert!(out.is_null());
    assert!(!unsafe { CStr::from_ptr(ml_version()) }.to_bytes().is_empty());
}

#[test]
fn dataset_max_margin() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let labels = dir.path().join("labels");
    // Three 1x1 images at 0, 1 and 3 with labels 0, 1, 1.
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 1];
    img.extend([0u8, 85, 255]);
    std::fs::write(&images, img).unwrap();
    std::fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 3, 0, 1, 1]).unwrap();
    let (ci, cl) = (
        CString::new(images.to_str().unwrap()).unwrap(),
        CString::new(labels.to_str().unwrap()).unwrap(),
    );
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(ml_dataset_load_idx(ci.as_ptr(), cl.as_ptr(), &mut ds), MlStatus::Ok);
        let (mut n, mut d, mut c) = (0, 0, 0);
        assert_eq!(ml_dataset_dims(ds, &mut n, &mut d, &mut c), MlStatus::Ok);
        assert_eq!((n, d), (3, 1));
        let mut row = [0.0];
        assert_eq!(ml_dataset_row(ds, 2, row.as_mut_ptr(), 1), MlStatus::Ok);
        assert_eq!(row[0], 1.0);
        let ids = [0u64, 1, 2];
        let mut dist = [0.0; 3];
        assert_eq!(ml_max_margin(ds, ids.as_ptr(), 3, dist.as_mut_ptr()), MlStatus::Ok);
        let r = f64::from(85.0f32 / 255.0);
        assert!((dist[0] - r).abs() < 1e-7 && (dist[1] - r).abs() < 1e-7 && (dist[2] - 1.0).abs() < 1e-7);
        let bad = [7u64];
        assert_eq!(ml_max_margin(ds, bad.as_ptr(), 1, dist.as_mut_ptr()), MlStatus::InvalidArgument);
        ml_dataset_free(ds);
    }
}

/// Compiles `tests/c/smoke.c` against the generated header and the static
/// library built alongside this test.
#[test]
fn c_program_links_and_runs() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libmarginlab_ffi.a");
    assert!(lib.is_file(), "static library missing at {}", lib.display());
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler is available");
    assert!(status.success());
    let run = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}");
    assert!(stdout.contains("i=0 j=1 margin=1.000000"), "{stdout}");
    assert!(stdout.contains("error: dimension mismatch") || stdout.contains("expects 2"), "{stdout}");
}
