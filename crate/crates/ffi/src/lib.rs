//! C ABI over `occflow-core`: load a checkpoint, encode a scenario into a
//! feature map and decode occupancy and backwards flow at arbitrary
//! `(x, y, t)` queries with either decoder.
//!
//! Every fallible function returns an [`OccflowStatus`]. On failure the
//! message is kept per thread and can be read with
//! [`occflow_last_error_message`]. Handles are opaque and owned by the
//! caller until passed to the matching `_free` function. Panics never cross
//! the boundary; they are reported as [`OccflowStatus::Panic`].

use occflow_core::encode::EncodeConfig;
use occflow_core::model::{load_checkpoint, FeatureMap, Model, ModelError, Prediction};
use occflow_core::scene::{QueryPoint, Scenario, SceneError, SensorConfig};
use occflow_core::train::{Example, TrainError};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccflowStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    FrameMismatch = 5,
    MissingDecoder = 6,
    OutOfExtent = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccflowDecoder {
    Implicit = 0,
    Explicit = 1,
}

/// A query in the ego frame: meters and seconds into the future.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccflowQuery {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

/// Flow is backwards, in meters per label step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OccflowPrediction {
    pub occ_prob: f64,
    pub occ_logit: f64,
    pub flow_dx: f64,
    pub flow_dy: f64,
}

/// Frame and architecture of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OccflowModelInfo {
    pub roi_w_m: f64,
    pub roi_h_m: f64,
    pub cell_m: f64,
    pub horizon_s: f64,
    pub label_dt_s: f64,
    pub history: u32,
    pub channels: u32,
    pub k: u32,
    pub has_implicit: bool,
    pub has_explicit: bool,
}

/// Simulated LiDAR and voxelization settings used to build model inputs
/// from a scenario. Must match the settings the model was trained with.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccflowInputConfig {
    pub rays: u32,
    pub max_range: f64,
    pub range_noise: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub seed: u64,
    pub binarize: bool,
}

/// A loaded checkpoint.
pub struct OccflowModel {
    model: Model<f32>,
}

/// Encoder output for one scene, tied to the model that produced it.
pub struct OccflowFeatures {
    features: FeatureMap<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Fail(OccflowStatus, String);

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn model_status(e: &ModelError) -> OccflowStatus {
    match e {
        ModelError::FrameMismatch(_) => OccflowStatus::FrameMismatch,
        ModelError::MissingDecoder(_) => OccflowStatus::MissingDecoder,
        ModelError::OutOfExtent { .. } => OccflowStatus::OutOfExtent,
        ModelError::EmptyQueries | ModelError::Config(_) => OccflowStatus::InvalidArgument,
        ModelError::Io(_) => OccflowStatus::Io,
        ModelError::Checkpoint(_) | ModelError::Nn(_) => OccflowStatus::Format,
    }
}

impl From<ModelError> for Fail {
    fn from(e: ModelError) -> Self {
        Fail(model_status(&e), e.to_string())
    }
}

impl From<SceneError> for Fail {
    fn from(e: SceneError) -> Self {
        let s = match e {
            SceneError::Io { .. } => OccflowStatus::Io,
            SceneError::Json { .. } | SceneError::Schema { .. } => OccflowStatus::Format,
            _ => OccflowStatus::InvalidArgument,
        };
        Fail(s, e.to_string())
    }
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Scene(s) => s.into(),
            other => Fail(OccflowStatus::Format, other.to_string()),
        }
    }
}

/// Runs `f`, recording any failure or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OccflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OccflowStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            OccflowStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(OccflowStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(OccflowStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Version string of the library, static and NUL-terminated.
#[no_mangle]
pub extern "C" fn occflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// in bytes excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn occflow_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

fn default_input() -> OccflowInputConfig {
    let s = SensorConfig::default();
    OccflowInputConfig {
        rays: s.rays as u32,
        max_range: s.max_range,
        range_noise: s.range_noise,
        min_height: s.min_height,
        max_height: s.max_height,
        seed: s.seed,
        binarize: EncodeConfig::default().binarize,
    }
}

/// Defaults matching the `sensor` and `encode` sections of a default run
/// configuration.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn occflow_input_config_default(out: *mut OccflowInputConfig) -> OccflowStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = default_input();
        Ok(())
    })
}

/// Loads the checkpoint directory `dir`.
///
/// # Safety
/// `dir` must be null or a NUL-terminated string; `out` must be null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn occflow_model_load(dir: *const c_char, out: *mut *mut OccflowModel) -> OccflowStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = std::ptr::null_mut();
        let dir = unsafe { path_arg(dir, "dir") }?;
        let model = load_checkpoint(&dir)?;
        *out = Box::into_raw(Box::new(OccflowModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`occflow_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn occflow_model_free(model: *mut OccflowModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be null or a live handle; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn occflow_model_info(model: *const OccflowModel, out: *mut OccflowModelInfo) -> OccflowStatus {
    guard(|| {
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.model;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let g = &m.frame.grid;
        *out = OccflowModelInfo {
            roi_w_m: g.roi.w_m,
            roi_h_m: g.roi.h_m,
            cell_m: g.cell_m,
            horizon_s: m.frame.horizon,
            label_dt_s: m.frame.label_dt,
            history: g.history as u32,
            channels: m.config.channels as u32,
            k: m.config.k as u32,
            has_implicit: m.has_implicit(),
            has_explicit: m.has_explicit(),
        };
        Ok(())
    })
}

/// Simulates LiDAR for the scenario JSON at `scenario_path`, voxelizes it
/// in the model's frame and runs the encoder. `input` may be null for
/// defaults.
///
/// # Safety
/// Pointers must be null or valid; `scenario_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn occflow_encode_scenario(
    model: *const OccflowModel,
    scenario_path: *const c_char,
    input: *const OccflowInputConfig,
    out: *mut *mut OccflowFeatures,
) -> OccflowStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = std::ptr::null_mut();
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.model;
        let path = unsafe { path_arg(scenario_path, "scenario_path") }?;
        let cfg = unsafe { input.as_ref() }.copied().unwrap_or_else(default_input);
        if cfg.rays == 0 {
            return Err(Fail(OccflowStatus::InvalidArgument, "rays must be positive".into()));
        }
        let sensor = SensorConfig {
            rays: cfg.rays as usize,
            max_range: cfg.max_range,
            range_noise: cfg.range_noise,
            min_height: cfg.min_height,
            max_height: cfg.max_height,
            seed: cfg.seed,
        };
        let g = &m.frame.grid;
        let enc = EncodeConfig {
            cell_m: g.cell_m,
            height_bins: g.height_bins,
            min_height: g.min_height,
            max_height: g.max_height,
            binarize: cfg.binarize,
        };
        let scn = Scenario::load_json(&path)?;
        let ex = Example::new(scn, &sensor, &enc)?;
        let features = m.encode_scene(&ex.lidar, &ex.map)?;
        *out = Box::into_raw(Box::new(OccflowFeatures { features }));
        Ok(())
    })
}

/// # Safety
/// `features` must be null or a handle from [`occflow_encode_scenario`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn occflow_features_free(features: *mut OccflowFeatures) {
    if !features.is_null() {
        drop(unsafe { Box::from_raw(features) });
    }
}

/// Decodes `n` queries into `out`. The explicit decoder interpolates its
/// dense grids and rejects queries outside their extent.
///
/// # Safety
/// `queries` must point to `n` readable queries and `out` to `n` writable
/// predictions; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn occflow_decode(
    model: *const OccflowModel,
    features: *const OccflowFeatures,
    decoder: OccflowDecoder,
    queries: *const OccflowQuery,
    n: usize,
    out: *mut OccflowPrediction,
) -> OccflowStatus {
    guard(|| {
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.model;
        let fm = &unsafe { features.as_ref() }.ok_or_else(|| null("features"))?.features;
        if n == 0 {
            return Err(Fail(OccflowStatus::InvalidArgument, "query count must be positive".into()));
        }
        if queries.is_null() {
            return Err(null("queries"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if fm.frame != m.frame {
            return Err(Fail(OccflowStatus::FrameMismatch, "features were encoded by a different model frame".into()));
        }
        let qs: Vec<QueryPoint> = unsafe { std::slice::from_raw_parts(queries, n) }
            .iter()
            .map(|q| QueryPoint::new(q.x, q.y, q.t))
            .collect();
        if qs.iter().any(|q| !(q.x.is_finite() && q.y.is_finite() && q.t.is_finite())) {
            return Err(Fail(OccflowStatus::InvalidArgument, "queries must be finite".into()));
        }
        let preds: Vec<Prediction> = match decoder {
            OccflowDecoder::Implicit => m.predict(fm, &qs)?,
            OccflowDecoder::Explicit => {
                let grids = m.explicit_decode(fm)?;
                qs.iter().map(|q| grids.query(q)).collect::<Result<_, _>>()?
            }
        };
        let dst = unsafe { std::slice::from_raw_parts_mut(out, n) };
        for (d, p) in dst.iter_mut().zip(preds) {
            *d = OccflowPrediction {
                occ_prob: p.occ_prob,
                occ_logit: p.occ_logit,
                flow_dx: p.flow.dx,
                flow_dy: p.flow.dy,
            };
        }
        Ok(())
    })
}
