use std::ffi::{CStr, CString};
use std::ptr;

use candle_core::{DType, Device};
use trajcast::cli::config::RunConfig;
use trajcast::model::{ModelArch, TrajectoryPipeline};
use trajcast::train::save_pipeline;
use trajcast_ffi::*;

fn pt(x: f64, y: f64) -> TcPoint {
    TcPoint { x, y }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(tc_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn metrics_match_hand_values() {
    let truth = [pt(0.0, 0.0), pt(1.0, 0.0), pt(2.0, 0.0)];
    // Offsets of 3-4-5, 0 and 6-8-10.
    let pred = [pt(3.0, 4.0), pt(1.0, 0.0), pt(8.0, 8.0)];
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(tc_ade(pred.as_ptr(), truth.as_ptr(), 3, &mut v), TcStatus::Ok);
        assert!((v - 5.0).abs() < 1e-12);
        assert_eq!(tc_fde(pred.as_ptr(), truth.as_ptr(), 3, &mut v), TcStatus::Ok);
        assert!((v - 10.0).abs() < 1e-12);
    }

    // Candidate 0 is better on average, candidate 1 at the end point.
    let cands = [pt(0.0, 0.1), pt(1.0, 0.1), pt(2.0, 0.5), pt(0.0, 1.0), pt(1.0, 1.0), pt(2.0, 0.2)];
    let (mut a, mut f, mut i) = (0.0, 0.0, usize::MAX);
    unsafe {
        let s = tc_min_of_k(cands.as_ptr(), 2, truth.as_ptr(), 3, TcSelect::MinAde, &mut a, &mut f, &mut i);
        assert_eq!(s, TcStatus::Ok);
        assert_eq!(i, 0);
        // minADE and minFDE are taken independently in this mode.
        assert!((a - 0.7 / 3.0).abs() < 1e-12 && (f - 0.2).abs() < 1e-12, "{a} {f}");
        let s = tc_min_of_k(cands.as_ptr(), 2, truth.as_ptr(), 3, TcSelect::MinFdeThenAde, &mut a, &mut f, &mut i);
        assert_eq!(s, TcStatus::Ok);
        assert_eq!(i, 1);
        assert!((a - 2.2 / 3.0).abs() < 1e-12 && (f - 0.2).abs() < 1e-12);
    }
}

#[test]
fn kde_nll_prefers_nearby_truth() {
    let samples: Vec<TcPoint> = (0..40)
        .flat_map(|s| {
            let d = (s as f64 - 20.0) * 0.01;
            [pt(d, 0.0), pt(1.0 + d, 0.0)]
        })
        .collect();
    let (mut near, mut far) = (0.0, 0.0);
    unsafe {
        let t = [pt(0.0, 0.0), pt(1.0, 0.0)];
        assert_eq!(tc_kde_nll(samples.as_ptr(), 40, t.as_ptr(), 2, &mut near), TcStatus::Ok);
        let t = [pt(0.5, 0.5), pt(1.5, 0.5)];
        assert_eq!(tc_kde_nll(samples.as_ptr(), 40, t.as_ptr(), 2, &mut far), TcStatus::Ok);
    }
    assert!(near.is_finite() && far.is_finite() && near < far, "{near} vs {far}");
}

#[test]
fn bad_arguments_return_codes_and_messages() {
    let truth = [pt(0.0, 0.0)];
    let mut v = 0.0;
    unsafe {
        assert_eq!(tc_ade(ptr::null(), truth.as_ptr(), 1, &mut v), TcStatus::NullArgument);
        assert!(last_error().contains("pred"), "{}", last_error());
        assert_eq!(tc_ade(truth.as_ptr(), truth.as_ptr(), 1, ptr::null_mut()), TcStatus::NullArgument);
        assert_eq!(tc_ade(truth.as_ptr(), truth.as_ptr(), 0, &mut v), TcStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        let (mut a, mut f, mut i) = (0.0, 0.0, 0);
        let s = tc_min_of_k(truth.as_ptr(), 0, truth.as_ptr(), 1, TcSelect::MinAde, &mut a, &mut f, &mut i);
        assert_eq!(s, TcStatus::InvalidArgument);

        let mut handle = ptr::null_mut();
        assert_eq!(tc_predictor_load(ptr::null(), &mut handle), TcStatus::NullArgument);
        let missing = CString::new("/nonexistent/model.safetensors").unwrap();
        let s = tc_predictor_load(missing.as_ptr(), &mut handle);
        assert!(matches!(s, TcStatus::Io | TcStatus::Checkpoint), "{s:?}");
        assert!(handle.is_null());
        assert!(last_error().contains("/nonexistent/model.safetensors"), "{}", last_error());

        assert_eq!(tc_predictor_history_len(ptr::null()), 0);
        tc_predictor_free(ptr::null_mut());
    }
    let version = unsafe { CStr::from_ptr(tc_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

fn saved_tiny(dir: &std::path::Path) -> CString {
    let arch = ModelArch::tiny();
    let pipeline = TrajectoryPipeline::new(&arch, 11, DType::F32, &Device::Cpu).unwrap();
    let cfg = RunConfig {
        model: arch,
        ..RunConfig::default()
    };
    let path = dir.join("model.safetensors");
    save_pipeline(&path, &pipeline, 0, None, None, &cfg.to_toml().unwrap()).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn predictor_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_tiny(dir.path());
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(tc_predictor_load(path.as_ptr(), &mut handle), TcStatus::Ok, "{}", last_error());
        assert_eq!(tc_predictor_history_len(handle), 4);
        assert_eq!(tc_predictor_horizon(handle), 3);
        let k = 5;
        let cands = tc_predictor_candidates(handle, k);
        assert_eq!(cands, 5);

        let observed: Vec<TcPoint> = (0..4).map(|t| pt(2.0 + 0.4 * t as f64, 3.0)).collect();
        // The target plus one neighbor at every step.
        let scene: Vec<TcPoint> = observed.iter().flat_map(|p| [*p, pt(p.x, 6.0)]).collect();
        let counts = [2usize; 4];
        let bounds = TcBounds {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 10.0,
            max_y: 8.0,
        };
        let run = |seed: u64| {
            let mut outp = vec![pt(f64::NAN, f64::NAN); cands * 3];
            let mut n = 0;
            let s = tc_predictor_predict(
                handle,
                observed.as_ptr(),
                4,
                scene.as_ptr(),
                counts.as_ptr(),
                bounds,
                0.4,
                k,
                seed,
                outp.as_mut_ptr(),
                outp.len(),
                &mut n,
            );
            assert_eq!(s, TcStatus::Ok, "{}", last_error());
            assert_eq!(n, cands);
            outp.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>()
        };
        let a = run(7);
        assert!(a.iter().all(|(x, y)| x.is_finite() && y.is_finite()));
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));

        let mut small = vec![pt(0.0, 0.0); 2];
        let mut n = 0;
        let s = tc_predictor_predict(
            handle,
            observed.as_ptr(),
            4,
            scene.as_ptr(),
            counts.as_ptr(),
            bounds,
            0.4,
            k,
            7,
            small.as_mut_ptr(),
            small.len(),
            &mut n,
        );
        assert_eq!(s, TcStatus::InvalidArgument);
        assert!(last_error().contains("needed"), "{}", last_error());

        let s = tc_predictor_predict(
            handle,
            observed.as_ptr(),
            3,
            scene.as_ptr(),
            counts.as_ptr(),
            bounds,
            0.4,
            k,
            7,
            small.as_mut_ptr(),
            small.len(),
            &mut n,
        );
        assert_eq!(s, TcStatus::InvalidArgument);
        tc_predictor_free(handle);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/trajcast.h")).unwrap();
    for name in [
        "TRAJCAST_H",
        "tc_last_error",
        "tc_ade",
        "tc_min_of_k",
        "tc_kde_nll",
        "tc_predictor_load",
        "tc_predictor_predict",
        "tc_predictor_free",
        "TC_STATUS_NULL_ARGUMENT",
        "TC_SELECT_MIN_FDE_THEN_ADE",
        "typedef struct TcPredictor TcPredictor",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "trajcast.h"
int use(void) {
    TcPoint p[2] = {{0, 0}, {1, 1}};
    double v;
    TcPredictor *h = NULL;
    if (tc_ade(p, p, 2, &v) != TC_STATUS_OK) return 1;
    if (tc_predictor_load("m.safetensors", &h) != TC_STATUS_OK) return (int)tc_last_error()[0];
    tc_predictor_free(h);
    return 0;
}
"#,
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
