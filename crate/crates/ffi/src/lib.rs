//! C ABI for the mapnet library.
//!
//! Handles are opaque pointers owned by this library; every function
//! returns a [`MapnetStatus`] and the last failure message is retrievable
//! per thread via [`mapnet_last_error`]. See the generated
//! `include/mapnet.h` for the C-side view.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};

use mapnet::config::{validate_config, RunConfig, RunMode};
use mapnet::data::load;
use mapnet::scalar::Precision;
use mapnet::train;
use mapnet::Error;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapnetStatus {
    Ok = 0,
    ConfigError = 1,
    DataError = 2,
    NumericError = 3,
    IoError = 4,
    InvalidArgument = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> MapnetStatus {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Contract(_) | Error::Dim(_) | Error::Bounds(_) => {
            MapnetStatus::ConfigError
        }
        Error::Data(_) | Error::Format(_) => MapnetStatus::DataError,
        Error::Numeric(_) => MapnetStatus::NumericError,
        Error::Io(_) => MapnetStatus::IoError,
    }
}

fn fail(err: Error) -> MapnetStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Opaque parsed-and-validated run configuration.
pub struct MapnetConfig {
    cfg: RunConfig,
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, MapnetStatus> {
    if p.is_null() {
        set_error(&format!("{what} is NULL"));
        return Err(MapnetStatus::InvalidArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        MapnetStatus::InvalidArgument
    })
}

/// Last error message for this thread. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn mapnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mapnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parse and validate a JSON run configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapnet_config_parse(
    json: *const c_char,
    out: *mut *mut MapnetConfig,
) -> MapnetStatus {
    if out.is_null() {
        set_error("out is NULL");
        return MapnetStatus::InvalidArgument;
    }
    let text = match cstr(json, "json") {
        Ok(t) => t,
        Err(s) => return s,
    };
    match validate_config(text, &[]) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(MapnetConfig { cfg }));
            MapnetStatus::Ok
        }
        Err(issues) => {
            let msgs: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
            set_error(&msgs.join("; "));
            MapnetStatus::ConfigError
        }
    }
}

/// Apply one dotted-key override to a parsed config, revalidating.
///
/// # Safety
/// `cfg` must come from `mapnet_config_parse`; strings are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mapnet_config_set(
    cfg: *mut MapnetConfig,
    key: *const c_char,
    value: *const c_char,
) -> MapnetStatus {
    if cfg.is_null() {
        set_error("cfg is NULL");
        return MapnetStatus::InvalidArgument;
    }
    let key = match cstr(key, "key") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let value = match cstr(value, "value") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let handle = &mut *cfg;
    let json = serde_json::to_string(&handle.cfg).unwrap();
    match validate_config(&json, &[(key.to_string(), value.to_string())]) {
        Ok(updated) => {
            handle.cfg = updated;
            MapnetStatus::Ok
        }
        Err(issues) => {
            let msgs: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
            set_error(&msgs.join("; "));
            MapnetStatus::ConfigError
        }
    }
}

/// Serialize the resolved config back to JSON (caller frees with
/// `mapnet_string_free`).
///
/// # Safety
/// `cfg` must come from `mapnet_config_parse`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapnet_config_to_json(
    cfg: *const MapnetConfig,
    out: *mut *mut c_char,
) -> MapnetStatus {
    if cfg.is_null() || out.is_null() {
        set_error("cfg or out is NULL");
        return MapnetStatus::InvalidArgument;
    }
    let text = serde_json::to_string_pretty(&(*cfg).cfg).unwrap();
    *out = CString::new(text).unwrap().into_raw();
    MapnetStatus::Ok
}

/// Free a config handle.
///
/// # Safety
/// `cfg` must come from `mapnet_config_parse` (NULL is a no-op).
#[no_mangle]
pub unsafe extern "C" fn mapnet_config_free(cfg: *mut MapnetConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must come from a mapnet function (NULL is a no-op).
#[no_mangle]
pub unsafe extern "C" fn mapnet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Free a float buffer returned by this library.
///
/// # Safety
/// `p`/`len` must come from `mapnet_generate_params` (NULL is a no-op).
#[no_mangle]
pub unsafe extern "C" fn mapnet_buffer_free(p: *mut f32, len: usize) {
    if !p.is_null() {
        drop(Vec::from_raw_parts(p, len, len));
    }
}

fn train_dispatch(cfg: &RunConfig, out_dir: &Path) -> Result<serde_json::Value, Error> {
    match cfg.precision {
        Precision::F32 => {
            let ds = load::<f32>(&cfg.dataset)?;
            let out = train::train(cfg, &ds, out_dir)?;
            Ok(serde_json::json!({
                "checkpoint": out.checkpoint,
                "trainable_params": out.trainable_params,
                "train_metric": out.final_train,
                "test_metric": out.final_test,
            }))
        }
        Precision::F64 => {
            let ds = load::<f64>(&cfg.dataset)?;
            let out = train::train(cfg, &ds, out_dir)?;
            Ok(serde_json::json!({
                "checkpoint": out.checkpoint,
                "trainable_params": out.trainable_params,
                "train_metric": out.final_train,
                "test_metric": out.final_test,
            }))
        }
    }
}

/// Train a run into `out_dir`, writing the resolved config, metrics
/// stream, and checkpoint. On success `result_json` (optional) receives a
/// summary the caller frees with `mapnet_string_free`.
///
/// # Safety
/// `cfg` must come from `mapnet_config_parse`; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mapnet_train(
    cfg: *const MapnetConfig,
    out_dir: *const c_char,
    result_json: *mut *mut c_char,
) -> MapnetStatus {
    if cfg.is_null() {
        set_error("cfg is NULL");
        return MapnetStatus::InvalidArgument;
    }
    let dir = match cstr(out_dir, "out_dir") {
        Ok(t) => PathBuf::from(t),
        Err(s) => return s,
    };
    let cfg = &(*cfg).cfg;
    if cfg.mode == RunMode::Ablation {
        set_error("ablation configs run through mapnet_train per cell; pick a cell mode");
        return MapnetStatus::ConfigError;
    }
    match train_dispatch(cfg, &dir) {
        Ok(summary) => {
            if !result_json.is_null() {
                *result_json = CString::new(summary.to_string()).unwrap().into_raw();
            }
            MapnetStatus::Ok
        }
        Err(e) => fail(e),
    }
}

fn eval_dispatch(path: &Path) -> Result<serde_json::Value, Error> {
    let cfg = train::peek_config(path)?;
    match cfg.precision {
        Precision::F32 => {
            let (_, state, spec) = train::load_state::<f32>(path)?;
            let ds = load::<f32>(&cfg.dataset)?;
            let train_m = train::evaluate(&cfg, &spec, &state, &ds, mapnet::data::Split::Train)?;
            let test_m = train::evaluate(&cfg, &spec, &state, &ds, mapnet::data::Split::Test)?;
            Ok(serde_json::json!({"train_metric": train_m, "test_metric": test_m}))
        }
        Precision::F64 => {
            let (_, state, spec) = train::load_state::<f64>(path)?;
            let ds = load::<f64>(&cfg.dataset)?;
            let train_m = train::evaluate(&cfg, &spec, &state, &ds, mapnet::data::Split::Train)?;
            let test_m = train::evaluate(&cfg, &spec, &state, &ds, mapnet::data::Split::Test)?;
            Ok(serde_json::json!({"train_metric": train_m, "test_metric": test_m}))
        }
    }
}

/// Evaluate a checkpoint on its configured dataset. The caller frees the
/// JSON result with `mapnet_string_free`.
///
/// # Safety
/// Strings are NUL-terminated; `result_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapnet_eval_checkpoint(
    checkpoint_path: *const c_char,
    result_json: *mut *mut c_char,
) -> MapnetStatus {
    let path = match cstr(checkpoint_path, "checkpoint_path") {
        Ok(t) => PathBuf::from(t),
        Err(s) => return s,
    };
    if result_json.is_null() {
        set_error("result_json is NULL");
        return MapnetStatus::InvalidArgument;
    }
    match eval_dispatch(&path) {
        Ok(v) => {
            *result_json = CString::new(v.to_string()).unwrap().into_raw();
            MapnetStatus::Ok
        }
        Err(e) => fail(e),
    }
}

fn generate_dispatch(path: &Path) -> Result<Vec<f32>, Error> {
    let cfg = train::peek_config(path)?;
    let flat: Vec<f32> = match cfg.precision {
        Precision::F32 => {
            let (_, state, spec) = train::load_state::<f32>(path)?;
            train::materialize_params(&cfg, &spec, &state)?
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect()
        }
        Precision::F64 => {
            let (_, state, spec) = train::load_state::<f64>(path)?;
            train::materialize_params(&cfg, &spec, &state)?
                .iter()
                .flat_map(|t| t.data().iter().map(|&v| v as f32).collect::<Vec<_>>())
                .collect()
        }
    };
    Ok(flat)
}

/// Regenerate the full flat parameter vector from a checkpoint's latents.
/// The buffer (always f32) is owned by the caller; free it with
/// `mapnet_buffer_free(buf, len)`.
///
/// # Safety
/// Strings are NUL-terminated; `out_buf` and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapnet_generate_params(
    checkpoint_path: *const c_char,
    out_buf: *mut *mut f32,
    out_len: *mut usize,
) -> MapnetStatus {
    let path = match cstr(checkpoint_path, "checkpoint_path") {
        Ok(t) => PathBuf::from(t),
        Err(s) => return s,
    };
    if out_buf.is_null() || out_len.is_null() {
        set_error("out_buf or out_len is NULL");
        return MapnetStatus::InvalidArgument;
    }
    match generate_dispatch(&path) {
        Ok(flat) => {
            *out_len = flat.len();
            let mut boxed = flat.into_boxed_slice();
            *out_buf = boxed.as_mut_ptr();
            std::mem::forget(boxed);
            MapnetStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn null_json_is_invalid_argument() {
        let mut out: *mut MapnetConfig = ptr::null_mut();
        let st = unsafe { mapnet_config_parse(ptr::null(), &mut out) };
        assert_eq!(st, MapnetStatus::InvalidArgument);
    }

    #[test]
    fn bad_json_reports_config_error_with_message() {
        let mut out: *mut MapnetConfig = ptr::null_mut();
        let json = CString::new("{ not json").unwrap();
        let st = unsafe { mapnet_config_parse(json.as_ptr(), &mut out) };
        assert_eq!(st, MapnetStatus::ConfigError);
        let msg = unsafe { CStr::from_ptr(mapnet_last_error()) };
        assert!(!msg.to_bytes().is_empty());
    }
}
