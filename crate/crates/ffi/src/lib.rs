//! C ABI for egomem.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free` function. Every fallible call returns an [`EgmStatus`];
//! on failure `egm_last_error_message` describes the error for the calling
//! thread. Strings returned by the library are released with
//! `egm_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use egomem::agent::{Pose, HEADING_BINS};
use egomem::envmemory::{environment_feature, EnvMemoryModel, PoseMode};
use egomem::localstate::{local_state_label, DirectionParams};
use egomem::observation::{egocentric_features, ObservationParams};
use egomem::worldgen::{generate_environment, EnvironmentSpec, GenParams};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgmStatus {
    EgmOk = 0,
    /// A required pointer argument was null.
    EgmNullArgument = 1,
    /// An argument was out of range or malformed.
    EgmInvalidArgument = 2,
    /// The output buffer is shorter than the result.
    EgmBufferTooSmall = 3,
    /// A file could not be read.
    EgmIo = 4,
    /// Generation or model evaluation failed.
    EgmFailed = 5,
    /// A Rust panic was caught at the boundary.
    EgmPanic = 6,
}

/// Opaque environment handle.
pub struct EgmEnv {
    spec: EnvironmentSpec,
}

/// Opaque environment memory model handle.
pub struct EgmModel {
    model: EnvMemoryModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(EgmStatus, String);

fn fail<T>(status: EgmStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, recording any error or panic for `egm_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EgmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EgmStatus::EgmOk,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            EgmStatus::EgmPanic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    // SAFETY: the caller guarantees `p` is null or points to a live `T`.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(EgmStatus::EgmNullArgument, format!("{name} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(EgmStatus::EgmNullArgument, format!("{name} is null"));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Fail(EgmStatus::EgmInvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return fail(EgmStatus::EgmNullArgument, format!("{name} is null"));
    }
    // SAFETY: the caller provides `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn pose(x: f64, z: f64, heading: u8) -> Result<Pose, Fail> {
    if !(x.is_finite() && z.is_finite()) || heading >= HEADING_BINS {
        return fail(EgmStatus::EgmInvalidArgument, format!("bad pose ({x}, {z}, heading bin {heading})"));
    }
    Ok(Pose::new(x, z, heading))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn egm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn egm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn egm_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by `CString::into_raw` in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Generates an environment with default parameters.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn egm_env_generate(seed: u64, out: *mut *mut EgmEnv) -> EgmStatus {
    guard(|| {
        if out.is_null() {
            return fail(EgmStatus::EgmNullArgument, "out is null");
        }
        let spec = generate_environment(seed, &GenParams::default()).map_err(|e| Fail(EgmStatus::EgmFailed, e.to_string()))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(EgmEnv { spec })) };
        Ok(())
    })
}

/// Parses an environment from its JSON form.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn egm_env_from_json(json: *const c_char, out: *mut *mut EgmEnv) -> EgmStatus {
    guard(|| {
        let text = unsafe { c_str(json, "json") }?;
        if out.is_null() {
            return fail(EgmStatus::EgmNullArgument, "out is null");
        }
        let spec = EnvironmentSpec::from_json(text).map_err(|e| Fail(EgmStatus::EgmInvalidArgument, e.to_string()))?;
        unsafe { *out = Box::into_raw(Box::new(EgmEnv { spec })) };
        Ok(())
    })
}

/// Serializes an environment to JSON; release the string with
/// `egm_string_free`.
///
/// # Safety
/// `env` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn egm_env_to_json(env: *const EgmEnv, out: *mut *mut c_char) -> EgmStatus {
    guard(|| {
        let env = unsafe { nonnull(env, "env") }?;
        if out.is_null() {
            return fail(EgmStatus::EgmNullArgument, "out is null");
        }
        let s = CString::new(env.spec.to_json()).map_err(|e| Fail(EgmStatus::EgmFailed, e.to_string()))?;
        unsafe { *out = s.into_raw() };
        Ok(())
    })
}

/// Number of object classes, which is the label length.
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn egm_env_object_classes(env: *const EgmEnv) -> usize {
    unsafe { env.as_ref() }.map_or(0, |e| e.spec.n_object_classes())
}

/// Length of the egocentric feature vector for this environment.
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn egm_env_feature_dim(env: *const EgmEnv) -> usize {
    unsafe { env.as_ref() }.map_or(0, |e| ObservationParams::default().feature_dim(e.spec.n_object_classes()))
}

/// Releases an environment. Null is ignored.
///
/// # Safety
/// `env` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn egm_env_free(env: *mut EgmEnv) {
    if !env.is_null() {
        drop(unsafe { Box::from_raw(env) });
    }
}

/// Local-state label at pose `(x, z, heading bin)`: one code per object class
/// (0 absent, 1 forward, 2 right, 3 behind, 4 left) into `out[0..out_len]`.
///
/// # Safety
/// `env` must be a live handle; `out` must hold `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn egm_local_state_label(env: *const EgmEnv, x: f64, z: f64, heading: u8, out: *mut u8, out_len: usize) -> EgmStatus {
    guard(|| {
        let env = unsafe { nonnull(env, "env") }?;
        let n = env.spec.n_object_classes();
        if out_len < n {
            return fail(EgmStatus::EgmBufferTooSmall, format!("label needs {n} bytes, got {out_len}"));
        }
        let out = unsafe { out_slice(out, n, "out") }?;
        let label = local_state_label(&env.spec, &pose(x, z, heading)?, &DirectionParams::default());
        out.copy_from_slice(label.entries());
        Ok(())
    })
}

/// Egocentric frame features at pose `(x, z, heading bin)` into `out`.
///
/// # Safety
/// `env` must be a live handle; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn egm_egocentric_features(env: *const EgmEnv, x: f64, z: f64, heading: u8, out: *mut f32, out_len: usize) -> EgmStatus {
    guard(|| {
        let env = unsafe { nonnull(env, "env") }?;
        let f = egocentric_features(&env.spec, &pose(x, z, heading)?, &ObservationParams::default());
        if out_len < f.len() {
            return fail(EgmStatus::EgmBufferTooSmall, format!("features need {} floats, got {out_len}", f.len()));
        }
        unsafe { out_slice(out, f.len(), "out") }?.copy_from_slice(&f);
        Ok(())
    })
}

/// Loads a model checkpoint (binary file plus its `.json` sidecar).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn egm_model_load(path: *const c_char, out: *mut *mut EgmModel) -> EgmStatus {
    guard(|| {
        let path = unsafe { c_str(path, "path") }?;
        if out.is_null() {
            return fail(EgmStatus::EgmNullArgument, "out is null");
        }
        let (model, _) = EnvMemoryModel::load(Path::new(path)).map_err(|e| {
            let status = match e {
                egomem::envmemory::ModelError::Checkpoint(egomem::numgrad::checkpoint::CheckpointError::Io(_)) => EgmStatus::EgmIo,
                _ => EgmStatus::EgmInvalidArgument,
            };
            Fail(status, e.to_string())
        })?;
        unsafe { *out = Box::into_raw(Box::new(EgmModel { model })) };
        Ok(())
    })
}

/// Width of the environment feature `h`.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn egm_model_dim(model: *const EgmModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.model.config.d)
}

/// Frame feature width the model expects.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn egm_model_feature_dim(model: *const EgmModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.model.config.feature_dim)
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn egm_model_free(model: *mut EgmModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Environment feature for `query_step` of a walkthrough of `steps` frames.
/// `features` is `steps × feature_dim` row-major, `poses` is `steps × 3`
/// (`x`, `z`, heading in radians, a multiple of pi/6), as in walkthrough
/// records. `k` memory frames are sampled on the inference
/// grid with relative poses. Writes `d` values to `out`.
///
/// # Safety
/// `model` must be a live handle and the buffers must have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn egm_environment_feature(
    model: *const EgmModel,
    features: *const f32,
    poses: *const f64,
    steps: usize,
    query_step: usize,
    k: usize,
    out: *mut f64,
    out_len: usize,
) -> EgmStatus {
    guard(|| {
        let model = unsafe { nonnull(model, "model") }?;
        let fd = model.model.config.feature_dim;
        if features.is_null() || poses.is_null() {
            return fail(EgmStatus::EgmNullArgument, "features or poses is null");
        }
        if steps == 0 || query_step >= steps || k == 0 {
            return fail(EgmStatus::EgmInvalidArgument, format!("need 0 <= query_step < steps and k > 0 (steps {steps}, query_step {query_step}, k {k})"));
        }
        let d = model.model.config.d;
        if out_len < d {
            return fail(EgmStatus::EgmBufferTooSmall, format!("h needs {d} doubles, got {out_len}"));
        }
        // SAFETY: sizes are part of the call contract.
        let flat = unsafe { std::slice::from_raw_parts(features, steps * fd) };
        let raw = unsafe { std::slice::from_raw_parts(poses, steps * 3) };
        let frames: Vec<Vec<f32>> = flat.chunks(fd).map(|c| c.to_vec()).collect();
        let poses = raw.chunks(3).map(|p| Pose::from_triple([p[0], p[1], p[2]])).collect::<Result<Vec<_>, _>>();
        let poses = poses.map_err(|e| Fail(EgmStatus::EgmInvalidArgument, e.to_string()))?;
        let f = environment_feature(&model.model, &frames, &poses, query_step, k, PoseMode::Relative)
            .map_err(|e| Fail(EgmStatus::EgmFailed, e.to_string()))?;
        unsafe { out_slice(out, d, "out") }?.copy_from_slice(&f.h);
        Ok(())
    })
}
