//! C ABI over the core library: opaque handles, integer status codes,
//! and a thread-local last-error message. The matching declarations live
//! in `include/toqnet.h`.
//!
//! Ownership rules: every `*_new`/`*_load`/`compile` result must be
//! released with the matching `*_free`; strings returned by
//! `toq_last_error_message` must be released with `toq_string_free`.
//! Null pointers are rejected with `TOQ_ERR_ARG`, never dereferenced.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;

use toqnet::compiler::{self, CompileMode, CompiledNet};
use toqnet::logic;
use toqnet::model::{self, ModelConfig, ModelParams};
use toqnet::synth;
use toqnet::train;

pub const TOQ_OK: c_int = 0;
/// Null pointer, invalid UTF-8, or out-of-range argument.
pub const TOQ_ERR_ARG: c_int = 1;
/// Parse, validation, fragment, or I/O failure; details via
/// `toq_last_error_message`.
pub const TOQ_ERR_INVALID: c_int = 2;
/// Unexpected internal failure.
pub const TOQ_ERR_INTERNAL: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Last error message on this thread as a fresh allocation, or null if no
/// error was recorded. Free with `toq_string_free`.
#[no_mangle]
pub extern "C" fn toq_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by this library, or null.
#[no_mangle]
pub unsafe extern "C" fn toq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

pub struct ToqModel {
    params: ModelParams,
}

pub struct ToqCompiled {
    net: CompiledNet,
    formula: logic::Formula,
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

/// Loads a model checkpoint (JSON) from `path`. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn toq_model_load_json(path: *const c_char) -> *mut ToqModel {
    let Some(path) = cstr(path) else {
        set_error("path is null or not UTF-8");
        return std::ptr::null_mut();
    };
    match model::load_checkpoint(Path::new(path)) {
        Ok(params) => Box::into_raw(Box::new(ToqModel { params })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `m` must come from `toq_model_load_json`/`toq_compiled_take_model`, or
/// be null. Must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn toq_model_free(m: *mut ToqModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Evaluates a model on a JSONL dataset; writes the macro accuracy to
/// `out_macro_acc`.
///
/// # Safety
/// `m` must be a live handle; `dataset_path` a valid string;
/// `out_macro_acc` a writable double or null.
#[no_mangle]
pub unsafe extern "C" fn toq_model_eval_dataset(
    m: *const ToqModel,
    dataset_path: *const c_char,
    out_macro_acc: *mut c_double,
) -> c_int {
    let Some(m) = m.as_ref() else {
        set_error("model handle is null");
        return TOQ_ERR_ARG;
    };
    let Some(path) = cstr(dataset_path) else {
        set_error("dataset path is null or not UTF-8");
        return TOQ_ERR_ARG;
    };
    let ds = match synth::load(Path::new(path)) {
        Ok(ds) => ds,
        Err(e) => {
            set_error(e.to_string());
            return TOQ_ERR_INVALID;
        }
    };
    match train::evaluate(&m.params, &ds.items) {
        Ok(report) => {
            if !out_macro_acc.is_null() {
                *out_macro_acc = report.macro_acc;
            }
            TOQ_OK
        }
        Err(e) => {
            set_error(e.to_string());
            TOQ_ERR_INVALID
        }
    }
}

/// Compiles `formula` to exact weights. `hard_mode` nonzero selects step
/// activations, zero sigmoid with `gain`. Returns null on failure.
///
/// # Safety
/// `formula` must be a valid NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn toq_compile(
    formula: *const c_char,
    hard_mode: c_int,
    gain: c_double,
    k_rrl: c_int,
    l_trl: c_int,
) -> *mut ToqCompiled {
    let Some(src) = cstr(formula) else {
        set_error("formula is null or not UTF-8");
        return std::ptr::null_mut();
    };
    if k_rrl < 1 || l_trl < 0 {
        set_error("layer counts out of range");
        return std::ptr::null_mut();
    }
    let f = match logic::parse(src) {
        Ok(f) => f,
        Err(e) => {
            set_error(e.to_string());
            return std::ptr::null_mut();
        }
    };
    let cfg = ModelConfig {
        k_rrl: k_rrl as usize,
        l_trl: l_trl as usize,
        rrl_dim: 8,
        trl_dim: 8,
        classes: 2,
        properties: vec![],
        thresholds_per_property: 1,
    };
    let mode = if hard_mode != 0 {
        CompileMode::Hard
    } else {
        CompileMode::Soft { gain }
    };
    match compiler::compile(&f, &cfg, mode) {
        Ok(net) => Box::into_raw(Box::new(ToqCompiled { net, formula: f })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `c` must come from `toq_compile` or be null; not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn toq_compiled_free(c: *mut ToqCompiled) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Checks a compiled network against the logic oracle over all traces of
/// the given shape (sampled with `limit`/`seed` when the space is large).
/// Writes the mismatch count and maximum activation deviation.
///
/// # Safety
/// `c` must be a live handle; out pointers writable or null.
#[no_mangle]
pub unsafe extern "C" fn toq_verify(
    c: *const ToqCompiled,
    t_len: c_int,
    n_entities: c_int,
    limit: c_int,
    seed: u64,
    out_mismatches: *mut c_int,
    out_max_dev: *mut c_double,
) -> c_int {
    let Some(c) = c.as_ref() else {
        set_error("compiled handle is null");
        return TOQ_ERR_ARG;
    };
    if t_len < 1 || n_entities < 1 || limit < 0 {
        set_error("trace shape out of range");
        return TOQ_ERR_ARG;
    }
    match compiler::verify(
        &c.net,
        &c.formula,
        t_len as usize,
        n_entities as usize,
        limit as usize,
        seed,
    ) {
        Ok(report) => {
            if !out_mismatches.is_null() {
                *out_mismatches = report.mismatches.min(c_int::MAX as usize) as c_int;
            }
            if !out_max_dev.is_null() {
                *out_max_dev = report.max_dev;
            }
            TOQ_OK
        }
        Err(e) => {
            set_error(e.to_string());
            TOQ_ERR_INTERNAL
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn compile_verify_through_the_abi() {
        let f = CString::new("p U (G q)").unwrap();
        let c = unsafe { toq_compile(f.as_ptr(), 1, 20.0, 2, 2) };
        assert!(!c.is_null());
        let mut mismatches = -1;
        let mut dev = -1.0;
        let rc = unsafe { toq_verify(c, 4, 1, 0, 0, &mut mismatches, &mut dev) };
        assert_eq!(rc, TOQ_OK);
        assert_eq!(mismatches, 0);
        assert_eq!(dev, 0.0);
        unsafe { toq_compiled_free(c) };
    }

    #[test]
    fn errors_are_reported_not_crashed() {
        let c = unsafe { toq_compile(std::ptr::null(), 1, 20.0, 2, 2) };
        assert!(c.is_null());
        let msg = toq_last_error_message();
        assert!(!msg.is_null());
        let text = unsafe { CStr::from_ptr(msg) }.to_str().unwrap().to_string();
        assert!(text.contains("null"), "{text}");
        unsafe { toq_string_free(msg) };

        // Fragment rejection surfaces through the same channel.
        let f = CString::new("exists x. G q1(x)").unwrap();
        let c = unsafe { toq_compile(f.as_ptr(), 1, 20.0, 3, 3) };
        assert!(c.is_null());
        let msg = toq_last_error_message();
        let text = unsafe { CStr::from_ptr(msg) }.to_str().unwrap().to_string();
        assert!(text.contains("unsupported fragment"), "{text}");
        unsafe { toq_string_free(msg) };

        let rc = unsafe { toq_verify(std::ptr::null(), 4, 1, 0, 0, std::ptr::null_mut(), std::ptr::null_mut()) };
        assert_eq!(rc, TOQ_ERR_ARG);
    }

    #[test]
    fn model_roundtrip_and_eval() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toqnet::synth::generate(&toqnet::synth::ScenarioConfig {
            n_entities: 4,
            t_len: 8,
            classes: vec![toqnet::synth::ClassKind::Chase, toqnet::synth::ClassKind::Guard],
            per_class: 4,
            noise_std: 0.05,
            seed: 5,
        })
        .unwrap();
        let data_path = dir.path().join("d.jsonl");
        toqnet::synth::save(&ds, &data_path).unwrap();

        let cfg = ModelConfig {
            k_rrl: 1,
            l_trl: 1,
            rrl_dim: 4,
            trl_dim: 4,
            classes: 2,
            properties: vec!["speed".into()],
            thresholds_per_property: 2,
        };
        let ext = model::fit_kinematic_extractor(&cfg, &ds.items, 1.0).unwrap();
        use toqnet::model::Extractor;
        let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(1);
        let params = ModelParams::init(cfg, Extractor::Kinematic(ext), &mut rng).unwrap();
        let ck_path = dir.path().join("ck.json");
        model::save_checkpoint(&params, &ck_path).unwrap();

        let cpath = CString::new(ck_path.to_str().unwrap()).unwrap();
        let handle = unsafe { toq_model_load_json(cpath.as_ptr()) };
        assert!(!handle.is_null());
        let dpath = CString::new(data_path.to_str().unwrap()).unwrap();
        let mut acc = -1.0;
        let rc = unsafe { toq_model_eval_dataset(handle, dpath.as_ptr(), &mut acc) };
        assert_eq!(rc, TOQ_OK);
        assert!((0.0..=1.0).contains(&acc));
        unsafe { toq_model_free(handle) };

        let missing = CString::new("/nonexistent/x.json").unwrap();
        assert!(unsafe { toq_model_load_json(missing.as_ptr()) }.is_null());
    }
}
