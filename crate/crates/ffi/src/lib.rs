//! C ABI over `gradeq`: load a checkpoint behind an opaque handle, score and
//! attribute single images, and evaluate the inequality and deviation formulas.
//!
//! Every function returns a [`GradeqStatus`]. On failure the message is kept
//! per thread and can be read with [`gradeq_last_error`]. Images are flat
//! `[C, H, W]` arrays of `double` in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use gradeq::attribution::saliency;
use gradeq::inequality::{gini, regional_gini};
use gradeq::models::{class_score, Checkpoint, LinearScoreModel, Network, ScoreModel};
use gradeq::theory::{predicted_deviation, NoiseSpec};
use gradeq::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradeqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed or corrupted checkpoint.
    Format = 4,
    Shape = 5,
    /// Population with zero total or fewer than two members.
    Degenerate = 6,
    NonFinite = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradeqNoiseKind {
    Additive = 0,
    MultAdditive = 1,
    Occlusion = 2,
}

/// Noise on masked pixels. For occlusion `mu_delta` and `sigma_delta` are
/// ignored and `color` is used; otherwise `color` is ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GradeqNoiseSpec {
    pub kind: GradeqNoiseKind,
    pub mu_delta: f64,
    pub sigma_delta: f64,
    pub mu_x: f64,
    pub sigma_x: f64,
    pub color: f64,
}

/// Opaque handle to a loaded network.
pub struct GradeqModel {
    network: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GradeqStatus {
    match e {
        Error::Shape(_) => GradeqStatus::Shape,
        Error::NonFinite { .. } => GradeqStatus::NonFinite,
        Error::Degenerate(_) => GradeqStatus::Degenerate,
        Error::Io { .. } => GradeqStatus::Io,
        Error::BadMagic | Error::UnsupportedVersion(_) | Error::Truncated(_) | Error::Integrity(_) | Error::Json(_) => {
            GradeqStatus::Format
        }
        Error::ClassOutOfRange { .. } | Error::Config(_) | Error::Precondition(_) => GradeqStatus::InvalidArgument,
        _ => GradeqStatus::Internal,
    }
}

struct Fail(GradeqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GradeqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            GradeqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside gradeq".into());
            GradeqStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GradeqStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn model<'a>(ptr: *const GradeqModel) -> Result<&'a GradeqModel, Fail> {
    ptr.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image(m: &GradeqModel, x: *const f64, len: usize) -> Result<Tensor, Fail> {
    let shape = m.network.input_shape().to_vec();
    let need: usize = shape.iter().product();
    if len != need {
        return Err(Fail(GradeqStatus::Shape, format!("image has {len} values, model expects {need} ({shape:?})")));
    }
    Ok(Tensor::new(shape, slice(x, len, "image")?.to_vec())?)
}

/// Message for the last failing call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gradeq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads and verifies a checkpoint. On success `*out_model` owns a handle to release
/// with [`gradeq_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gradeq_model_load(path: *const c_char, out_model: *mut *mut GradeqModel) -> GradeqStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let slot = out(out_model, "out_model")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(GradeqStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = Checkpoint::load(path)?;
        *slot = Box::into_raw(Box::new(GradeqModel { network: ckpt.network }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`gradeq_model_load`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gradeq_model_free(model: *mut GradeqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[C, H, W]` to `shape[0..3]` and the class count to `classes`.
///
/// # Safety
/// `shape` must point to 3 writable `size_t`, `classes` to one.
#[no_mangle]
pub unsafe extern "C" fn gradeq_model_shape(
    model: *const GradeqModel,
    shape: *mut usize,
    classes: *mut usize,
) -> GradeqStatus {
    guard(|| {
        let m = self::model(model)?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let s = m.network.input_shape();
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&s[..3]);
        *out(classes, "classes")? = m.network.classes();
        Ok(())
    })
}

/// Logit of class `target` for one image.
///
/// # Safety
/// `x` must hold `len` doubles and `score` be writable.
#[no_mangle]
pub unsafe extern "C" fn gradeq_model_class_score(
    model: *const GradeqModel,
    x: *const f64,
    len: usize,
    target: usize,
    score: *mut f64,
) -> GradeqStatus {
    guard(|| {
        let m = self::model(model)?;
        let slot = out(score, "score")?;
        *slot = class_score(&m.network, &image(m, x, len)?, target)?;
        Ok(())
    })
}

/// Gradient of the `target` logit with respect to the image, `[C, H, W]`.
///
/// # Safety
/// `x` and `grad` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gradeq_model_saliency(
    model: *const GradeqModel,
    x: *const f64,
    len: usize,
    target: usize,
    grad: *mut f64,
) -> GradeqStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = image(m, x, len)?;
        if grad.is_null() {
            return Err(null("grad"));
        }
        let map = saliency(&m.network, &img, target)?;
        std::slice::from_raw_parts_mut(grad, len).copy_from_slice(map.values.data());
        Ok(())
    })
}

/// Gini coefficient of a non-negative population.
///
/// # Safety
/// `values` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gradeq_gini(values: *const f64, len: usize, result: *mut f64) -> GradeqStatus {
    guard(|| {
        let v = slice(values, len, "values")?;
        *out(result, "result")? = gini(v)?;
        Ok(())
    })
}

/// Gini of the `block x block` sums of a row-major `h x w` map.
///
/// # Safety
/// `map` must hold `h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn gradeq_regional_gini(
    map: *const f64,
    h: usize,
    w: usize,
    block: usize,
    result: *mut f64,
) -> GradeqStatus {
    guard(|| {
        let n = h.checked_mul(w).ok_or_else(|| Fail(GradeqStatus::Shape, "h * w overflows".into()))?;
        let t = Tensor::new(vec![h, w], slice(map, n, "map")?.to_vec())?;
        *out(result, "result")? = regional_gini(&t, block)?;
        Ok(())
    })
}

/// Predicted variance of the class-score deviation of the linear score
/// `w · x` when the entries `coords` are perturbed as `spec` describes.
///
/// # Safety
/// `w` must hold `len` doubles and `coords` `k` indices.
#[no_mangle]
pub unsafe extern "C" fn gradeq_predicted_deviation(
    w: *const f64,
    len: usize,
    coords: *const usize,
    k: usize,
    spec: *const GradeqNoiseSpec,
    result: *mut f64,
) -> GradeqStatus {
    guard(|| {
        let s = spec.as_ref().ok_or_else(|| null("spec"))?;
        let spec = match s.kind {
            GradeqNoiseKind::Additive => NoiseSpec::additive(s.mu_delta, s.sigma_delta),
            GradeqNoiseKind::MultAdditive => NoiseSpec::mult_additive(s.mu_delta, s.sigma_delta, s.mu_x, s.sigma_x),
            GradeqNoiseKind::Occlusion => NoiseSpec::occlusion(s.color, s.mu_x, s.sigma_x),
        };
        let model = LinearScoreModel::new(Tensor::new(vec![1, 1, len], slice(w, len, "w")?.to_vec())?, 0.0);
        *out(result, "result")? = predicted_deviation(&model, slice(coords, k, "coords")?, &spec)?;
        Ok(())
    })
}
