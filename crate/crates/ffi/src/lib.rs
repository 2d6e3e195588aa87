//! C ABI over the trajcast metrics and a checkpoint-backed predictor.
//!
//! Every function returns a [`TcStatus`]; on failure the message is
//! available from [`tc_last_error`] on the same thread. Points are passed
//! as flat arrays of [`TcPoint`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajcast::cli::RunConfig;
use trajcast::dataset::{history_features, Bounds, Point, SequenceSample};
use trajcast::density::SceneGeometry;
use trajcast::eval::{ade, fde, kde_nll, min_of_k, KdeConfig, SelectMode};
use trajcast::model::{build_batch, prepare_sample, SceneLatents, TrajectoryPipeline};
use trajcast::train::load_pipeline;
use trajcast::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Lengths or values outside the documented range.
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Data = 6,
    Checkpoint = 7,
    /// Numerical or internal failure.
    Internal = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TcPoint {
    pub x: f64,
    pub y: f64,
}

/// Axis-aligned scene extent in world units, before the density margin.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TcBounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

/// Candidate selection for [`tc_min_of_k`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcSelect {
    /// minADE and minFDE taken independently.
    MinAde = 0,
    /// The lowest-FDE candidate's ADE and FDE.
    MinFdeThenAde = 1,
}

/// Opaque predictor loaded from a model checkpoint.
pub struct TcPredictor {
    pipeline: TrajectoryPipeline,
    sigma_map: f64,
    margin: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(TcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Parse { .. } => TcStatus::Parse,
            Error::Data(_) => TcStatus::Data,
            Error::Config(_) => TcStatus::Config,
            Error::Contract(_) => TcStatus::InvalidArgument,
            Error::Checkpoint(_) => TcStatus::Checkpoint,
            Error::Io { .. } => TcStatus::Io,
            _ => TcStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TcStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            TcStatus::Panic
        }
    }
}

unsafe fn points<'a>(ptr: *const TcPoint, len: usize, what: &str) -> Result<Vec<Point>, Failure> {
    if ptr.is_null() {
        return Err(Failure(TcStatus::NullArgument, format!("{what} is null")));
    }
    let s = std::slice::from_raw_parts(ptr, len);
    Ok(s.iter().map(|p| [p.x, p.y]).collect())
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| Failure(TcStatus::NullArgument, format!("{what} is null")))
}

/// Splits `k * t` points into `k` rows.
fn rows(flat: Vec<Point>, k: usize, t: usize) -> Vec<Vec<Point>> {
    (0..k).map(|i| flat[i * t..(i + 1) * t].to_vec()).collect()
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Average displacement between two `len`-point trajectories.
///
/// # Safety
/// `pred` and `truth` must point to `len` readable points; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tc_ade(pred: *const TcPoint, truth: *const TcPoint, len: usize, out_value: *mut f64) -> TcStatus {
    guard(|| {
        let p = points(pred, len, "pred")?;
        let t = points(truth, len, "truth")?;
        *out(out_value, "out_value")? = ade(&p, &t)?;
        Ok(())
    })
}

/// Displacement at the final step.
///
/// # Safety
/// As for [`tc_ade`].
#[no_mangle]
pub unsafe extern "C" fn tc_fde(pred: *const TcPoint, truth: *const TcPoint, len: usize, out_value: *mut f64) -> TcStatus {
    guard(|| {
        let p = points(pred, len, "pred")?;
        let t = points(truth, len, "truth")?;
        *out(out_value, "out_value")? = fde(&p, &t)?;
        Ok(())
    })
}

/// Best-of-K over `k` candidates laid out `[k][len]`.
///
/// # Safety
/// `preds` must hold `k * len` points and `truth` `len` points; the three
/// outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_min_of_k(
    preds: *const TcPoint,
    k: usize,
    truth: *const TcPoint,
    len: usize,
    select: TcSelect,
    out_ade: *mut f64,
    out_fde: *mut f64,
    out_index: *mut usize,
) -> TcStatus {
    guard(|| {
        let n = k.checked_mul(len).ok_or_else(|| invalid("k * len overflows"))?;
        let cands = rows(points(preds, n, "preds")?, k, len);
        let t = points(truth, len, "truth")?;
        let mode = match select {
            TcSelect::MinAde => SelectMode::MinAde,
            TcSelect::MinFdeThenAde => SelectMode::MinFdeThenAde,
        };
        let r = min_of_k(&cands, &t, mode)?;
        *out(out_ade, "out_ade")? = r.ade;
        *out(out_fde, "out_fde")? = r.fde;
        *out(out_index, "out_index")? = r.index;
        Ok(())
    })
}

/// KDE negative log-likelihood of `truth` under `num_samples` sampled
/// trajectories laid out `[num_samples][len]`, with default bandwidth
/// settings.
///
/// # Safety
/// `samples` must hold `num_samples * len` points and `truth` `len`.
#[no_mangle]
pub unsafe extern "C" fn tc_kde_nll(
    samples: *const TcPoint,
    num_samples: usize,
    truth: *const TcPoint,
    len: usize,
    out_value: *mut f64,
) -> TcStatus {
    guard(|| {
        let n = num_samples.checked_mul(len).ok_or_else(|| invalid("num_samples * len overflows"))?;
        let s = rows(points(samples, n, "samples")?, num_samples, len);
        let t = points(truth, len, "truth")?;
        *out(out_value, "out_value")? = kde_nll(&s, &t, &KdeConfig::default())?;
        Ok(())
    })
}

/// Loads a model checkpoint. The density settings recorded with it are
/// used when rendering scene maps; defaults apply if none were recorded.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out_handle` writable.
/// Release the handle with [`tc_predictor_free`].
#[no_mangle]
pub unsafe extern "C" fn tc_predictor_load(path: *const c_char, out_handle: *mut *mut TcPredictor) -> TcStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure(TcStatus::NullArgument, "path is null".into()));
        }
        let slot = out(out_handle, "out_handle")?;
        *slot = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let loaded = load_pipeline(Path::new(path), DType::F32, &Device::Cpu)?;
        let density = if loaded.meta.config.is_empty() {
            RunConfig::default().density
        } else {
            RunConfig::from_toml(&loaded.meta.config)?.density
        };
        let handle = TcPredictor {
            pipeline: loaded.pipeline,
            sigma_map: density.sigma_map,
            margin: density.margin,
        };
        *slot = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`tc_predictor_load`] and not be used again.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tc_predictor_free(handle: *mut TcPredictor) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Observed steps the model expects (0 for a null handle).
///
/// # Safety
/// `handle` must be null or a live predictor.
#[no_mangle]
pub unsafe extern "C" fn tc_predictor_history_len(handle: *const TcPredictor) -> usize {
    handle.as_ref().map_or(0, |h| h.pipeline.arch.tau)
}

/// Predicted steps per candidate (0 for a null handle).
///
/// # Safety
/// `handle` must be null or a live predictor.
#[no_mangle]
pub unsafe extern "C" fn tc_predictor_horizon(handle: *const TcPredictor) -> usize {
    handle.as_ref().map_or(0, |h| h.pipeline.arch.horizon)
}

/// Candidates produced for a request of `k` (1 for deterministic models).
///
/// # Safety
/// `handle` must be null or a live predictor.
#[no_mangle]
pub unsafe extern "C" fn tc_predictor_candidates(handle: *const TcPredictor, k: usize) -> usize {
    handle.as_ref().map_or(0, |h| h.pipeline.effective_k(k))
}

/// Predicts futures for one agent.
///
/// `observed` holds the agent's `history_len` positions, `dt` seconds
/// apart. For models with the relation module, `scene_points` holds every
/// agent present at each observed step (the target included), concatenated
/// step by step, with `scene_counts[t]` points at step `t`; `bounds` is the
/// scene extent. Other models ignore these and accept nulls.
///
/// Writes `tc_predictor_candidates(k) * horizon` points to `out_points`
/// (laid out `[candidate][step]`) and the candidate count to
/// `out_candidates`. The same `seed` gives the same output.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out_points` must
/// have room for `out_capacity` points.
#[no_mangle]
pub unsafe extern "C" fn tc_predictor_predict(
    handle: *const TcPredictor,
    observed: *const TcPoint,
    history_len: usize,
    scene_points: *const TcPoint,
    scene_counts: *const usize,
    bounds: TcBounds,
    dt: f64,
    k: usize,
    seed: u64,
    out_points: *mut TcPoint,
    out_capacity: usize,
    out_candidates: *mut usize,
) -> TcStatus {
    guard(|| {
        let h = handle
            .as_ref()
            .ok_or_else(|| Failure(TcStatus::NullArgument, "handle is null".into()))?;
        let arch = &h.pipeline.arch;
        if history_len != arch.tau {
            return Err(invalid(format!("model observes {} steps, got {history_len}", arch.tau)));
        }
        if k == 0 || !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("k must be positive and dt a positive number"));
        }
        let observed = points(observed, history_len, "observed")?;
        let frames: Vec<i64> = (0..history_len as i64).collect();
        let sample = SequenceSample {
            scene_id: "ffi".into(),
            agent_id: 0,
            t0: 0,
            obs_frames: frames.clone(),
            history: history_features(&observed, dt),
            future: Vec::new(),
            neighbors: Vec::new(),
        };
        let prepared = if arch.use_relation {
            if scene_counts.is_null() {
                return Err(Failure(TcStatus::NullArgument, "scene_counts is null".into()));
            }
            let counts = std::slice::from_raw_parts(scene_counts, history_len);
            let total = counts
                .iter()
                .try_fold(0usize, |a, c| a.checked_add(*c))
                .ok_or_else(|| invalid("scene_counts overflow"))?;
            let flat = points(scene_points, total, "scene_points")?;
            let mut per_frame = Vec::with_capacity(history_len);
            let mut at = 0;
            for c in counts {
                per_frame.push(flat[at..at + c].to_vec());
                at += c;
            }
            let scene_bounds = Bounds {
                min: [bounds.min_x, bounds.min_y],
                max: [bounds.max_x, bounds.max_y],
            };
            let geometry = SceneGeometry::from_bounds(&scene_bounds, arch.autoencoder.map_size, h.margin)?;
            let latents = SceneLatents::encode_positions(&per_frame, &frames, &geometry, h.sigma_map, &h.pipeline.autoencoder)?;
            let window = latents.window(&frames)?;
            prepare_sample(&sample, Some((&window, &latents)), false)?
        } else {
            prepare_sample(&sample, None, false)?
        };
        let batch = build_batch(&[&prepared], arch, h.pipeline.dtype(), h.pipeline.device())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = h.pipeline.predict(&batch, k, &mut rng)?;
        let trajs = &pred[0].trajectories;
        let needed = trajs.len() * arch.horizon;
        if out_points.is_null() {
            return Err(Failure(TcStatus::NullArgument, "out_points is null".into()));
        }
        if out_capacity < needed {
            return Err(invalid(format!("out_points holds {out_capacity} points, {needed} needed")));
        }
        let dst = std::slice::from_raw_parts_mut(out_points, needed);
        for (slot, p) in dst.iter_mut().zip(trajs.iter().flatten()) {
            *slot = TcPoint { x: p[0], y: p[1] };
        }
        *out(out_candidates, "out_candidates")? = trajs.len();
        Ok(())
    })
}
