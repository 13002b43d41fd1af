//! C interface to `delta-core`.
//!
//! Objects cross the boundary as opaque handles created by a `*_load`
//! function and released by the matching `*_free`. Every fallible function
//! returns a [`DeltaStatus`]; on failure the message is available from
//! [`delta_last_error`] on the same thread until the next failing call.
//! Panics are caught and reported as `DELTA_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use delta_core::analysis::normalize_activation_map;
use delta_core::attention::AttentionTable;
use delta_core::data::{load_dataset, Dataset};
use delta_core::experiment::{run_experiment, ExperimentConfig};
use delta_core::model::{load_checkpoint, ConvNetModel};
use delta_core::tensor::{ops, Tensor};
use delta_core::trainer::{schedule_lr, ScheduleSpec};
use delta_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Index = 5,
    Contract = 6,
    Lookup = 7,
    Validation = 8,
    NonFinite = 9,
    Parse = 10,
    Diverged = 11,
    Io = 12,
    Panic = 13,
}

/// A trained network.
pub struct DeltaModel(ConvNetModel);

/// A labeled image set.
pub struct DeltaDataset(Dataset);

/// Per-sample filter attention weights.
pub struct DeltaAttention(AttentionTable);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DeltaStatus {
    match e {
        Error::Shape(_) => DeltaStatus::Shape,
        Error::Config(_) | Error::Toml(_) => DeltaStatus::Config,
        Error::Index(_) => DeltaStatus::Index,
        Error::Contract(_) => DeltaStatus::Contract,
        Error::Lookup(_) => DeltaStatus::Lookup,
        Error::Validation(_) => DeltaStatus::Validation,
        Error::NonFinite(_) => DeltaStatus::NonFinite,
        Error::Parse { .. } | Error::Json(_) => DeltaStatus::Parse,
        Error::Diverged { .. } => DeltaStatus::Diverged,
        Error::Io(_) => DeltaStatus::Io,
    }
}

/// Failure raised inside a wrapper before reaching the library.
struct Fail(DeltaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DeltaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DeltaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DeltaStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DeltaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DeltaStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null("input buffer")),
        (false, _) => Ok(slice::from_raw_parts(p, len)),
    }
}

unsafe fn output<'a>(p: *mut f64, len: usize) -> Result<&'a mut [f64], Fail> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&mut []),
        (true, _) => Err(null("output buffer")),
        (false, _) => Ok(slice::from_raw_parts_mut(p, len)),
    }
}

unsafe fn write<T>(p: *mut T, value: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null("output pointer"));
    }
    p.write(value);
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn delta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn delta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint into a new model handle.
#[no_mangle]
pub unsafe extern "C" fn delta_model_load(path: *const c_char, out: *mut *mut DeltaModel) -> DeltaStatus {
    guard(|| {
        let model = load_checkpoint(path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(DeltaModel(model))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn delta_model_free(model: *mut DeltaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the `(C, H, W)` input shape into `shape[0..3]`.
#[no_mangle]
pub unsafe extern "C" fn delta_model_input_shape(model: *const DeltaModel, shape: *mut usize) -> DeltaStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        slice::from_raw_parts_mut(shape, 3).copy_from_slice(&m.0.spec().input);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn delta_model_num_classes(model: *const DeltaModel, out: *mut usize) -> DeltaStatus {
    guard(|| write(out, handle(model, "model")?.0.num_classes()))
}

/// Order-sensitive checksum over all parameter values.
#[no_mangle]
pub unsafe extern "C" fn delta_model_checksum(model: *const DeltaModel, out: *mut u64) -> DeltaStatus {
    guard(|| write(out, handle(model, "model")?.0.parameter_checksum()))
}

/// Logits for `batch` images stored contiguously as `(B, C, H, W)`.
/// `logits` must hold `batch * num_classes` values.
#[no_mangle]
pub unsafe extern "C" fn delta_model_forward(
    model: *const DeltaModel,
    images: *const f64,
    batch: usize,
    logits: *mut f64,
    logits_len: usize,
) -> DeltaStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        let [c, h, w] = m.spec().input;
        let k = m.num_classes();
        if logits_len != batch * k {
            return Err(invalid(format!("logits buffer holds {logits_len}, need {}", batch * k)));
        }
        let x = Tensor::new(vec![batch, c, h, w], input(images, batch * c * h * w)?.to_vec())?;
        let y = m.forward(&x)?;
        output(logits, logits_len)?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Loads a dataset file or class-directory tree.
#[no_mangle]
pub unsafe extern "C" fn delta_dataset_load(path: *const c_char, out: *mut *mut DeltaDataset) -> DeltaStatus {
    guard(|| {
        let d = load_dataset(path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(DeltaDataset(d))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn delta_dataset_free(dataset: *mut DeltaDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

#[no_mangle]
pub unsafe extern "C" fn delta_dataset_len(dataset: *const DeltaDataset, out: *mut usize) -> DeltaStatus {
    guard(|| write(out, handle(dataset, "dataset")?.0.len()))
}

#[no_mangle]
pub unsafe extern "C" fn delta_dataset_num_classes(dataset: *const DeltaDataset, out: *mut usize) -> DeltaStatus {
    guard(|| write(out, handle(dataset, "dataset")?.0.num_classes()))
}

/// Loads an attention table.
#[no_mangle]
pub unsafe extern "C" fn delta_attention_load(path: *const c_char, out: *mut *mut DeltaAttention) -> DeltaStatus {
    guard(|| {
        let t = AttentionTable::load(path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(DeltaAttention(t))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn delta_attention_free(table: *mut DeltaAttention) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

#[no_mangle]
pub unsafe extern "C" fn delta_attention_len(table: *const DeltaAttention, out: *mut usize) -> DeltaStatus {
    guard(|| write(out, handle(table, "attention table")?.0.len()))
}

/// Copies the weights of `sample` at tap `layer` into `out`, which holds
/// `capacity` values; the filter count goes to `written`.
#[no_mangle]
pub unsafe extern "C" fn delta_attention_weights(
    table: *const DeltaAttention,
    sample: usize,
    layer: usize,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> DeltaStatus {
    guard(|| {
        let w = handle(table, "attention table")?.0.weights(sample, layer)?;
        if capacity < w.len() {
            return Err(invalid(format!("buffer holds {capacity}, need {}", w.len())));
        }
        output(out, w.len())?.copy_from_slice(w);
        write(written, w.len())
    })
}

/// Runs the full experiment described by a TOML file.
#[no_mangle]
pub unsafe extern "C" fn delta_run_experiment(config_path: *const c_char) -> DeltaStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(path_arg(config_path)?)?;
        run_experiment(&cfg)?;
        Ok(())
    })
}

/// Step decay: `base * factor^floor(iteration / step)`.
#[no_mangle]
pub extern "C" fn delta_step_lr(base_lr: f64, factor: f64, step: usize, iteration: usize) -> f64 {
    schedule_lr(&ScheduleSpec::step(base_lr, factor, step), iteration, 0)
}

/// Exponential decay: `base * factor^epoch`.
#[no_mangle]
pub extern "C" fn delta_exponential_lr(base_lr: f64, factor: f64, epoch: usize) -> f64 {
    schedule_lr(&ScheduleSpec::exponential(base_lr, factor), 0, epoch)
}

/// Numerically stable softmax of `n` values.
#[no_mangle]
pub unsafe extern "C" fn delta_softmax(values: *const f64, n: usize, out: *mut f64) -> DeltaStatus {
    guard(|| {
        let v = input(values, n)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Fail(DeltaStatus::NonFinite, "softmax input is not finite".into()));
        }
        output(out, n)?.copy_from_slice(&ops::softmax(v));
        Ok(())
    })
}

/// Min-max normalization of a row-major `rows x cols` map; constant maps
/// become zeros.
#[no_mangle]
pub unsafe extern "C" fn delta_normalize_activation_map(
    map: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> DeltaStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("map size overflows"))?;
        let t = Tensor::new(vec![rows, cols], input(map, n)?.to_vec())?;
        output(out, n)?.copy_from_slice(normalize_activation_map(&t)?.data());
        Ok(())
    })
}
