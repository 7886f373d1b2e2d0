//! C ABI over `edd`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released with the matching `*_free`. Every fallible
//! call returns an [`EddStatus`]; on failure the message is available from
//! [`edd_last_error`] on the same thread until the next failing call.
//! Panics are caught and reported as `EDD_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use edd::cli::load_data;
use edd::config::{RunConfig, Values};
use edd::data::Dataset;
use edd::distill::{init_synthetic, run, SyntheticSet};
use edd::eval::train_on_synthetic;
use edd::modelpool::{pretrain_pool, Pool};
use edd::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EddStatus {
    Ok = 0,
    /// Invalid argument or state.
    Invalid = 1,
    /// A configured input file or directory does not exist.
    MissingInput = 2,
    /// Distillation hit a NaN or infinite loss.
    NonFinite = 3,
    /// A file is truncated or has the wrong layout.
    Format = 4,
    Io = 5,
    NullArgument = 6,
    Config = 7,
    Panic = 8,
}

/// Resolved run configuration.
pub struct EddConfig {
    values: Values,
}

/// A loaded dataset split.
pub struct EddDataset {
    inner: Dataset,
}

/// A pool of pretrained checkpoints.
pub struct EddPool {
    inner: Pool,
}

/// A synthetic image set.
pub struct EddSynthetic {
    inner: SyntheticSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EddStatus {
    match e {
        Error::Config { .. } => EddStatus::Config,
        Error::MissingInput { .. } => EddStatus::MissingInput,
        Error::NonFinite { .. } => EddStatus::NonFinite,
        Error::Format { .. } | Error::Serde(_) => EddStatus::Format,
        Error::Io { .. } => EddStatus::Io,
        _ => EddStatus::Invalid,
    }
}

enum Fail {
    Null(&'static str),
    Edd(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Edd(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EddStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EddStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            EddStatus::NullArgument
        }
        Ok(Err(Fail::Edd(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EddStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Edd(Error::Config { key: what.into(), msg: "not valid UTF-8".into() }))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    let slot = as_mut(out, what)?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn resolved(cfg: &EddConfig) -> Result<RunConfig, Fail> {
    Ok(RunConfig::from_values(cfg.values.clone())?)
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn edd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn edd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A configuration holding every default.
#[no_mangle]
pub unsafe extern "C" fn edd_config_new(out: *mut *mut EddConfig) -> EddStatus {
    guard(|| put(out, EddConfig { values: Values::default() }, "out"))
}

/// Reads a `key = value` file on top of the defaults.
#[no_mangle]
pub unsafe extern "C" fn edd_config_load(path: *const c_char, out: *mut *mut EddConfig) -> EddStatus {
    guard(|| {
        let values = Values::load(&PathBuf::from(as_str(path, "path")?))?;
        put(out, EddConfig { values }, "out")
    })
}

/// Sets one key; unknown keys fail with `EDD_STATUS_CONFIG`.
#[no_mangle]
pub unsafe extern "C" fn edd_config_set(cfg: *mut EddConfig, key: *const c_char, value: *const c_char) -> EddStatus {
    guard(|| {
        let cfg = as_mut(cfg, "cfg")?;
        cfg.values.set(as_str(key, "key")?, as_str(value, "value")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn edd_config_free(cfg: *mut EddConfig) {
    free(cfg)
}

/// Loads the training and test splits named by the configuration.
#[no_mangle]
pub unsafe extern "C" fn edd_dataset_load(cfg: *const EddConfig, train: *mut *mut EddDataset, test: *mut *mut EddDataset) -> EddStatus {
    guard(|| {
        let rc = resolved(as_ref(cfg, "cfg")?)?;
        as_mut(train, "train")?;
        as_mut(test, "test")?;
        let (tr, te) = load_data(&rc)?;
        put(train, EddDataset { inner: tr }, "train")?;
        put(test, EddDataset { inner: te }, "test")
    })
}

/// Number of images, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn edd_dataset_len(ds: *const EddDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

#[no_mangle]
pub unsafe extern "C" fn edd_dataset_free(ds: *mut EddDataset) {
    free(ds)
}

/// Pretrains `pool.n` models for `pool.epochs` epochs and writes them to `pool.dir`.
#[no_mangle]
pub unsafe extern "C" fn edd_pretrain(cfg: *const EddConfig, train: *const EddDataset, out: *mut *mut EddPool) -> EddStatus {
    guard(|| {
        let rc = resolved(as_ref(cfg, "cfg")?)?;
        let ds = &as_ref(train, "train")?.inner;
        as_mut(out, "out")?;
        let arch = rc.model.arch(ds.num_classes(), ds.image_dims());
        let records = pretrain_pool(ds, &arch, &rc.pretrain, Some(&rc.pool_dir))?;
        put(out, EddPool { inner: Pool::new(records)? }, "out")
    })
}

/// Loads every `.ddck` checkpoint in a directory.
#[no_mangle]
pub unsafe extern "C" fn edd_pool_load(dir: *const c_char, out: *mut *mut EddPool) -> EddStatus {
    guard(|| {
        let dir = PathBuf::from(as_str(dir, "dir")?);
        if !dir.is_dir() {
            return Err(Error::MissingInput { key: "pool.dir".into(), path: dir }.into());
        }
        put(out, EddPool { inner: Pool::load_dir(&dir)? }, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn edd_pool_len(pool: *const EddPool) -> usize {
    pool.as_ref().map_or(0, |p| p.inner.len())
}

#[no_mangle]
pub unsafe extern "C" fn edd_pool_free(pool: *mut EddPool) {
    free(pool)
}

/// Initializes from real images and distills. The update counts may be NULL.
#[no_mangle]
pub unsafe extern "C" fn edd_distill(
    cfg: *const EddConfig,
    train: *const EddDataset,
    pool: *const EddPool,
    out: *mut *mut EddSynthetic,
    synthetic_updates: *mut usize,
    network_updates: *mut usize,
) -> EddStatus {
    guard(|| {
        let rc = resolved(as_ref(cfg, "cfg")?)?;
        let ds = &as_ref(train, "train")?.inner;
        let pool = &as_ref(pool, "pool")?.inner;
        as_mut(out, "out")?;
        let s0 = init_synthetic(ds, rc.ipc, rc.factor, &mut ChaCha8Rng::seed_from_u64(rc.seed))?;
        let (s, log) = run(ds, pool, &s0, &rc.distill)?;
        if let Some(n) = synthetic_updates.as_mut() {
            *n = log.synthetic_updates;
        }
        if let Some(n) = network_updates.as_mut() {
            *n = log.network_updates;
        }
        put(out, EddSynthetic { inner: s }, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn edd_synthetic_import(path: *const c_char, out: *mut *mut EddSynthetic) -> EddStatus {
    guard(|| {
        let path = PathBuf::from(as_str(path, "path")?);
        if !path.is_file() {
            return Err(Error::MissingInput { key: "synthetic".into(), path }.into());
        }
        put(out, EddSynthetic { inner: SyntheticSet::import(&path)? }, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn edd_synthetic_export(s: *const EddSynthetic, path: *const c_char) -> EddStatus {
    guard(|| {
        let s = &as_ref(s, "s")?.inner;
        s.export(&PathBuf::from(as_str(path, "path")?))?;
        Ok(())
    })
}

/// Stored image dimensions `[n, c, h, w]`.
#[no_mangle]
pub unsafe extern "C" fn edd_synthetic_dims(s: *const EddSynthetic, dims: *mut usize) -> EddStatus {
    guard(|| {
        let s = &as_ref(s, "s")?.inner;
        if dims.is_null() {
            return Err(Fail::Null("dims"));
        }
        let d = s.images().dims();
        for (i, &v) in d.iter().enumerate().take(4) {
            *dims.add(i) = v;
        }
        Ok(())
    })
}

/// Copies the stored images as 8-bit pixels (NCHW). `len` must equal n*c*h*w.
#[no_mangle]
pub unsafe extern "C" fn edd_synthetic_pixels(s: *const EddSynthetic, buf: *mut u8, len: usize) -> EddStatus {
    guard(|| {
        let s = &as_ref(s, "s")?.inner;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let px = s.to_u8();
        if px.len() != len {
            return Err(Error::Config { key: "len".into(), msg: format!("buffer holds {len} bytes, {} needed", px.len()) }.into());
        }
        ptr::copy_nonoverlapping(px.as_ptr(), buf, len);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn edd_synthetic_free(s: *mut EddSynthetic) {
    free(s)
}

/// Trains `eval.reps` networks on the set and reports mean and std of test accuracy.
#[no_mangle]
pub unsafe extern "C" fn edd_eval(
    cfg: *const EddConfig,
    s: *const EddSynthetic,
    test: *const EddDataset,
    mean: *mut f64,
    std: *mut f64,
) -> EddStatus {
    guard(|| {
        let rc = resolved(as_ref(cfg, "cfg")?)?;
        let s = &as_ref(s, "s")?.inner;
        let test = &as_ref(test, "test")?.inner;
        let mean = as_mut(mean, "mean")?;
        let std = as_mut(std, "std")?;
        let protocol = rc.protocol(rc.model.arch(test.num_classes(), test.image_dims()));
        let report = train_on_synthetic(s, &protocol, test, rc.eval_reps, rc.seed)?;
        *mean = report.mean;
        *std = report.std;
        Ok(())
    })
}
