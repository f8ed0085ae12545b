//! C ABI over `marginlab`.
//!
//! Objects are opaque handles created by `*_load`/`*_new` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`MlStatus`]; on failure, [`ml_last_error`] describes what went wrong on
//! the calling thread. Buffers are always caller-allocated with an explicit
//! length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use marginlab::data::{load_idx_dataset, read_dataset, LabeledDataset};
use marginlab::geometry::{max_margin, Labeling};
use marginlab::model::{read_checkpoint, MlpModel};
use marginlab::solver::{bisection_upper_bound, solve_margin, MarginResult, PairStatus, RestartPolicy, SolverConfig};
use marginlab::{Classifier, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    /// The call succeeded but no valid margin exists.
    NoMargin = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Internal = 9,
}

/// Opaque trained network.
pub struct MlModel(MlpModel);

/// Opaque labeled dataset.
pub struct MlDataset(LabeledDataset);

/// Opaque result of [`ml_margin`].
pub struct MlMarginResult(MarginResult);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlRestartPolicy {
    None = 0,
    BisectionSeed = 1,
}

/// Mirror of the solver configuration; fill it with
/// [`ml_solver_config_default`] and adjust.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlSolverConfig {
    pub validity_threshold: f64,
    pub inner_max_iters: usize,
    pub outer_max_iters: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub multiplier_init: f64,
    pub convergence_tol: f64,
    pub feasibility_tol: f64,
    pub restart_policy: MlRestartPolicy,
    pub sandwich_tol: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlPairStatus {
    Valid = 0,
    InvalidResidual = 1,
    NonFinite = 2,
    Dominated = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlPairInfo {
    pub j: usize,
    pub distance: f64,
    pub residual: f64,
    pub status: MlPairStatus,
    pub evaluations: usize,
    /// Class beating both `i` and `j` at the solution, or -1.
    pub dominated_by: i64,
    pub restarted: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> MlStatus {
    match e {
        Error::Io { .. } => MlStatus::Io,
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::Format { .. } | Error::CountMismatch { .. } => MlStatus::Format,
        Error::DimensionMismatch { .. } => MlStatus::DimensionMismatch,
        Error::SameClass(_)
        | Error::ClassOutOfRange { .. }
        | Error::InvalidConfig(_)
        | Error::UnknownSample(_)
        | Error::EmptyDataset
        | Error::LabelOutOfRange { .. } => MlStatus::InvalidArgument,
        _ => MlStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<MlStatus, (MlStatus, String)>) -> MlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside marginlab");
            MlStatus::Panic
        }
    }
}

fn lib<T>(r: marginlab::Result<T>) -> Result<T, (MlStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MlStatus, String) {
    (MlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (MlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MlStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (MlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], (MlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err((MlStatus::BufferTooSmall, format!("{what} holds {len}, needs {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn model_ref<'a>(m: *const MlModel) -> Result<&'a MlpModel, (MlStatus, String)> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

/// Copies the calling thread's last error message into `buf` (always NUL
/// terminated when `len > 0`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ml_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `.mlpm` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_model_load(path: *const c_char, out: *mut *mut MlModel) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = lib(read_checkpoint(&path_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MlModel(m)));
        Ok(MlStatus::Ok)
    })
}

/// Builds a model from row-major weights: `w1` is `hidden x input`, `w2`
/// is `classes x hidden`.
///
/// # Safety
/// Each array must hold the number of elements its shape implies.
#[no_mangle]
pub unsafe extern "C" fn ml_model_from_parts(
    input_dim: usize,
    hidden_width: usize,
    num_classes: usize,
    w1: *const f64,
    b1: *const f64,
    w2: *const f64,
    b2: *const f64,
    out: *mut *mut MlModel,
) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w1 = slice_arg(w1, hidden_width * input_dim, "w1")?.to_vec();
        let b1 = slice_arg(b1, hidden_width, "b1")?.to_vec();
        let w2 = slice_arg(w2, num_classes * hidden_width, "w2")?.to_vec();
        let b2 = slice_arg(b2, num_classes, "b2")?.to_vec();
        let m = lib(MlpModel::from_parts(input_dim, hidden_width, num_classes, 0, w1, b1, w2, b2))?;
        *out = Box::into_raw(Box::new(MlModel(m)));
        Ok(MlStatus::Ok)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ml_model_free(model: *mut MlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ml_model_dims(model: *const MlModel, input_dim: *mut usize, hidden_width: *mut usize, num_classes: *mut usize) -> MlStatus {
    guard(|| {
        let m = model_ref(model)?;
        for (p, v) in [(input_dim, m.input_dim()), (hidden_width, m.hidden_width()), (num_classes, m.num_classes())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(MlStatus::Ok)
    })
}

/// Writes the logits of `x` into `out`.
///
/// # Safety
/// `x` must hold `x_len` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ml_model_logits(model: *const MlModel, x: *const f64, x_len: usize, out: *mut f64, out_len: usize) -> MlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let logits = lib(m.forward(slice_arg(x, x_len, "x")?))?;
        out_slice(out, out_len, logits.len(), "out")?.copy_from_slice(&logits);
        Ok(MlStatus::Ok)
    })
}

/// # Safety
/// `x` must hold `x_len` values; `class_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_model_predict(model: *const MlModel, x: *const f64, x_len: usize, class_out: *mut usize) -> MlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = slice_arg(x, x_len, "x")?;
        if x.len() != m.input_dim() {
            return Err((MlStatus::DimensionMismatch, format!("x has {} values, model expects {}", x.len(), m.input_dim())));
        }
        if class_out.is_null() {
            return Err(null("class_out"));
        }
        *class_out = m.predict(x);
        Ok(MlStatus::Ok)
    })
}

/// Gradient of `f(x)[i] - f(x)[j]` with respect to `x`.
///
/// # Safety
/// `x` must hold `x_len` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ml_model_input_gradient(
    model: *const MlModel,
    x: *const f64,
    x_len: usize,
    i: usize,
    j: usize,
    out: *mut f64,
    out_len: usize,
) -> MlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let g = lib(m.input_gradient(slice_arg(x, x_len, "x")?, i, j))?;
        out_slice(out, out_len, g.len(), "out")?.copy_from_slice(&g);
        Ok(MlStatus::Ok)
    })
}

impl From<&SolverConfig> for MlSolverConfig {
    fn from(c: &SolverConfig) -> Self {
        MlSolverConfig {
            validity_threshold: c.validity_threshold,
            inner_max_iters: c.inner_max_iters,
            outer_max_iters: c.outer_max_iters,
            penalty_init: c.penalty_init,
            penalty_growth: c.penalty_growth,
            multiplier_init: c.multiplier_init,
            convergence_tol: c.convergence_tol,
            feasibility_tol: c.feasibility_tol,
            restart_policy: match c.restart_policy {
                RestartPolicy::None => MlRestartPolicy::None,
                RestartPolicy::BisectionSeed => MlRestartPolicy::BisectionSeed,
            },
            sandwich_tol: c.sandwich_tol,
        }
    }
}

impl From<&MlSolverConfig> for SolverConfig {
    fn from(c: &MlSolverConfig) -> Self {
        SolverConfig {
            validity_threshold: c.validity_threshold,
            inner_max_iters: c.inner_max_iters,
            outer_max_iters: c.outer_max_iters,
            penalty_init: c.penalty_init,
            penalty_growth: c.penalty_growth,
            multiplier_init: c.multiplier_init,
            convergence_tol: c.convergence_tol,
            feasibility_tol: c.feasibility_tol,
            restart_policy: match c.restart_policy {
                MlRestartPolicy::None => RestartPolicy::None,
                MlRestartPolicy::BisectionSeed => RestartPolicy::BisectionSeed,
            },
            sandwich_tol: c.sandwich_tol,
        }
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_solver_config_default(out: *mut MlSolverConfig) -> MlStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = MlSolverConfig::from(&SolverConfig::default());
        Ok(MlStatus::Ok)
    })
}

/// Margin of `x` under `model`. `reference` (a differently classified
/// point of the same length, or null) enables the bisection bound and
/// restart; `config` may be null for the defaults. Returns
/// `ML_STATUS_NO_MARGIN` with a valid `*out` when no pair converged.
///
/// # Safety
/// `x` and `reference` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_margin(
    model: *const MlModel,
    x: *const f64,
    reference: *const f64,
    len: usize,
    config: *const MlSolverConfig,
    out: *mut *mut MlMarginResult,
) -> MlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = slice_arg(x, len, "x")?;
        let reference = if reference.is_null() { None } else { Some(slice_arg(reference, len, "reference")?) };
        let cfg = config.as_ref().map_or_else(SolverConfig::default, SolverConfig::from);
        lib(cfg.validate())?;
        let r = lib(solve_margin(m, 0, x, reference, &cfg))?;
        let valid = r.margin.is_some();
        *out = Box::into_raw(Box::new(MlMarginResult(r)));
        Ok(if valid { MlStatus::Ok } else { MlStatus::NoMargin })
    })
}

/// # Safety
/// `result` must come from [`ml_margin`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ml_margin_result_free(result: *mut MlMarginResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Margin, winning class `j*` and predicted class `i`. Out pointers may be
/// null.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ml_margin_result_value(result: *const MlMarginResult, margin: *mut f64, j_star: *mut usize, i: *mut usize) -> MlStatus {
    guard(|| {
        let r = &result.as_ref().ok_or_else(|| null("result"))?.0;
        if !i.is_null() {
            *i = r.i;
        }
        let (Some(m), Some(j)) = (r.margin, r.j_star) else {
            return Err((MlStatus::NoMargin, "no class pair converged".into()));
        };
        if !margin.is_null() {
            *margin = m;
        }
        if !j_star.is_null() {
            *j_star = j;
        }
        Ok(MlStatus::Ok)
    })
}

/// Bisection bound toward the reference, or `NaN` without one.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ml_margin_result_upper_bound(result: *const MlMarginResult) -> f64 {
    result.as_ref().and_then(|r| r.0.upper_bound).unwrap_or(f64::NAN)
}

/// Copies the nearest boundary point into `out`.
///
/// # Safety
/// `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ml_margin_result_point(result: *const MlMarginResult, out: *mut f64, out_len: usize) -> MlStatus {
    guard(|| {
        let r = &result.as_ref().ok_or_else(|| null("result"))?.0;
        let p = r.boundary_point.as_ref().ok_or((MlStatus::NoMargin, "no boundary point".into()))?;
        out_slice(out, out_len, p.len(), "out")?.copy_from_slice(p);
        Ok(MlStatus::Ok)
    })
}

/// Number of class pairs attempted.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ml_margin_result_pair_count(result: *const MlMarginResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.pairs.len())
}

/// # Safety
/// `result` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_margin_result_pair(result: *const MlMarginResult, index: usize, out: *mut MlPairInfo) -> MlStatus {
    guard(|| {
        let r = &result.as_ref().ok_or_else(|| null("result"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = r
            .pairs
            .get(index)
            .ok_or_else(|| (MlStatus::InvalidArgument, format!("pair {index} of {}", r.pairs.len())))?;
        *out = MlPairInfo {
            j: p.j,
            distance: p.distance,
            residual: p.residual,
            status: match p.status {
                PairStatus::Valid => MlPairStatus::Valid,
                PairStatus::InvalidResidual => MlPairStatus::InvalidResidual,
                PairStatus::NonFinite => MlPairStatus::NonFinite,
                PairStatus::Dominated => MlPairStatus::Dominated,
            },
            evaluations: p.evaluations,
            dominated_by: p.dominated_by.map_or(-1, |k| k as i64),
            restarted: p.restarted,
        };
        Ok(MlStatus::Ok)
    })
}

/// Distance from `x` to the first class change on the segment toward
/// `other`.
///
/// # Safety
/// `x` and `other` must hold `len` values; `distance` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_bisection_upper_bound(model: *const MlModel, x: *const f64, other: *const f64, len: usize, distance: *mut f64) -> MlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = lib(bisection_upper_bound(m, slice_arg(x, len, "x")?, slice_arg(other, len, "other")?))?;
        *distance.as_mut().ok_or_else(|| null("distance"))? = c.distance;
        Ok(MlStatus::Ok)
    })
}

/// Loads an IDX image/label file pair as a training split.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_load_idx(images: *const c_char, labels: *const c_char, out: *mut *mut MlDataset) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = lib(load_idx_dataset(&path_arg(images, "images")?, &path_arg(labels, "labels")?))?;
        *out = Box::into_raw(Box::new(MlDataset(ds)));
        Ok(MlStatus::Ok)
    })
}

/// Loads a `.mlds` dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_load(path: *const c_char, out: *mut *mut MlDataset) -> MlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = lib(read_dataset(&path_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MlDataset(ds)));
        Ok(MlStatus::Ok)
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_free(ds: *mut MlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_dims(ds: *const MlDataset, len: *mut usize, dim: *mut usize, num_classes: *mut usize) -> MlStatus {
    guard(|| {
        let d = &ds.as_ref().ok_or_else(|| null("dataset"))?.0;
        for (p, v) in [(len, d.len()), (dim, d.dim()), (num_classes, d.num_classes())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(MlStatus::Ok)
    })
}

/// Copies row `index` of the dataset, widened to double precision.
///
/// # Safety
/// `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ml_dataset_row(ds: *const MlDataset, index: usize, out: *mut f64, out_len: usize) -> MlStatus {
    guard(|| {
        let d = &ds.as_ref().ok_or_else(|| null("dataset"))?.0;
        if index >= d.len() {
            return Err((MlStatus::InvalidArgument, format!("row {index} of {}", d.len())));
        }
        let out = out_slice(out, out_len, d.dim(), "out")?;
        for (o, v) in out.iter_mut().zip(d.row(index)) {
            *o = f64::from(*v);
        }
        Ok(MlStatus::Ok)
    })
}

/// Distance from each sample in `ids` to the nearest sample with a
/// different effective label.
///
/// # Safety
/// `ids` must hold `n` values and `distances` `n` writable values.
#[no_mangle]
pub unsafe extern "C" fn ml_max_margin(ds: *const MlDataset, ids: *const u64, n: usize, distances: *mut f64) -> MlStatus {
    guard(|| {
        let d = &ds.as_ref().ok_or_else(|| null("dataset"))?.0;
        let ids = slice_arg(ids, n, "ids")?;
        let found = lib(max_margin(d, ids, Labeling::EffectiveLabels))?;
        let out = out_slice(distances, n, n, "distances")?;
        for (o, nb) in out.iter_mut().zip(found) {
            *o = nb.distance;
        }
        Ok(MlStatus::Ok)
    })
}
