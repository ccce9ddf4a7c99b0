//! C ABI for croplandws.
//!
//! Every fallible function returns a [`CwsStatus`]; on failure a message is
//! available from [`cws_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Arrays are row-major and owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use croplandws::checkpoint::Checkpoint;
use croplandws::eval::{confusion, metrics, EvalReport, TilePredictor};
use croplandws::fusion::{rate_quality, ProductStack};
use croplandws::manifest::DatasetManifest;
use croplandws::raster::RasterGrid;
use croplandws::sits::SitsCube;
use croplandws::Error;
use ndarray::{Array2, Array3, Array4};

/// Result of every fallible call. The error values equal the command-line
/// exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CwsStatus {
    Ok = 0,
    /// Bad configuration or argument.
    Config = 2,
    /// Unreadable, missing or inconsistent data.
    Data = 3,
    /// Failure while computing (divergence, I/O while writing).
    Runtime = 4,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 5,
    /// The library panicked; the handle involved should be discarded.
    Panic = 6,
}

/// A trained model loaded from disk.
pub struct CwsCheckpoint {
    inner: Checkpoint,
}

/// Accuracy percentages of a binary map; see `cws_evaluate`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CwsReport {
    pub oa: f64,
    pub miou: f64,
    pub avg_f1: f64,
    pub crop_f1: f64,
    pub noncrop_f1: f64,
    pub pa_crop: f64,
    pub ua_crop: f64,
    pub pa_noncrop: f64,
    pub ua_noncrop: f64,
    /// Confusion counts, rows = reference (non-crop, crop), columns = prediction.
    pub counts: [u64; 4],
}

impl From<&EvalReport> for CwsReport {
    fn from(r: &EvalReport) -> Self {
        let c = r.confusion.counts;
        CwsReport {
            oa: r.oa,
            miou: r.miou,
            avg_f1: r.avg_f1,
            crop_f1: r.crop_f1,
            noncrop_f1: r.noncrop_f1,
            pa_crop: r.pa_crop,
            ua_crop: r.ua_crop,
            pa_noncrop: r.pa_noncrop,
            ua_noncrop: r.ua_noncrop,
            counts: [c[0][0], c[0][1], c[1][0], c[1][1]],
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Lib(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> CwsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CwsStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            CwsStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            match e.exit_code() {
                2 => CwsStatus::Config,
                3 => CwsStatus::Data,
                _ => CwsStatus::Runtime,
            }
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CwsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> std::result::Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Arg(format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> std::result::Result<PathBuf, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> std::result::Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> std::result::Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn shape_err(e: ndarray::ShapeError) -> Failure {
    Failure::Arg(e.to_string())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cws_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cws_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `croplandws train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cws_checkpoint_load(path: *const c_char, out: *mut *mut CwsCheckpoint) -> CwsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let inner = Checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(CwsCheckpoint { inner }));
        Ok(())
    })
}

/// Releases a checkpoint. NULL is ignored.
///
/// # Safety
/// `ck` must come from `cws_checkpoint_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cws_checkpoint_free(ck: *mut CwsCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Spectral channels and temporal positions the model expects.
///
/// # Safety
/// `ck` must be a live handle; `channels` and `frames` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cws_checkpoint_shape(
    ck: *const CwsCheckpoint,
    channels: *mut usize,
    frames: *mut usize,
) -> CwsStatus {
    guard(|| {
        non_null(ck, "checkpoint")?;
        non_null(channels, "channels")?;
        non_null(frames, "frames")?;
        let cfg = &(*ck).inner.model.config;
        *channels = cfg.input_channels;
        *frames = cfg.temporal_positions;
        Ok(())
    })
}

/// Predicts one tile.
///
/// `frames` holds `t·c·h·w` reflectances ordered [T, C, H, W]; `validity`
/// holds `t·h·w` flags (nonzero = usable); `period_labels` holds `t`
/// one-based period numbers (months for monthly composites). On success
/// `probs` receives `2·h·w` values ordered [K, H, W], non-crop first.
///
/// # Safety
/// All pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cws_predict_tile(
    ck: *const CwsCheckpoint,
    frames: *const f64,
    validity: *const u8,
    period_labels: *const u32,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    probs: *mut f64,
) -> CwsStatus {
    guard(|| {
        non_null(ck, "checkpoint")?;
        let n = t * h * w;
        let x = slice(frames, n * c, "frames")?;
        let v = slice(validity, n, "validity")?;
        let labels = slice(period_labels, t, "period_labels")?;
        let frames = Array4::from_shape_vec((t, c, h, w), x.to_vec()).map_err(shape_err)?;
        let validity = Array3::from_shape_vec((t, h, w), v.iter().map(|&b| b != 0).collect()).map_err(shape_err)?;
        let cube = SitsCube::new(frames, labels.to_vec(), validity)?;
        let p = (*ck).inner.predict_tile(&cube)?;
        let out = slice_mut(probs, p.len(), "probs")?;
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Maps a whole dataset with sliding windows and writes `probs.tif` and
/// `map.tif` into `out_dir`.
///
/// # Safety
/// `ck` must be a live handle; the paths NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cws_map_dataset(
    ck: *const CwsCheckpoint,
    manifest_path: *const c_char,
    out_dir: *const c_char,
) -> CwsStatus {
    guard(|| {
        non_null(ck, "checkpoint")?;
        let m = DatasetManifest::load(path_arg(manifest_path, "manifest_path")?)?;
        let out = path_arg(out_dir, "out_dir")?;
        croplandws::cli::cmd_map(&(*ck).inner, &m, &out)?;
        Ok(())
    })
}

/// Cross-product quality rating.
///
/// `layers` holds `m·h·w` binary labels ordered [M, H, W] (0, 1, or 255
/// for no data). `mask` receives 1 where all products agree, `labels` the
/// agreed label there and 255 elsewhere; both hold `h·w` bytes.
///
/// # Safety
/// All pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cws_rate_quality(
    layers: *const u8,
    m: usize,
    h: usize,
    w: usize,
    mask: *mut u8,
    labels: *mut u8,
) -> CwsStatus {
    guard(|| {
        let src = slice(layers, m * h * w, "layers")?;
        let grid = RasterGrid::new(w, h, (0.0, h as f64), 1.0, "LOCAL")?;
        let planes = src
            .chunks(h * w)
            .map(|p| Array2::from_shape_vec((h, w), p.to_vec()).map_err(shape_err))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let ids = (0..m).map(|i| format!("product{i}")).collect();
        let (q, l) = rate_quality(&ProductStack::new(grid, planes, ids)?)?;
        slice_mut(mask, h * w, "mask")?.copy_from_slice(q.mask.as_slice().expect("standard layout"));
        slice_mut(labels, h * w, "labels")?.copy_from_slice(l.labels.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Scores a binary map against a reference over the pixels that are not
/// 255 in either raster.
///
/// # Safety
/// `pred` and `reference` must hold `h·w` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cws_evaluate(
    pred: *const u8,
    reference: *const u8,
    h: usize,
    w: usize,
    out: *mut CwsReport,
) -> CwsStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = Array2::from_shape_vec((h, w), slice(pred, h * w, "pred")?.to_vec()).map_err(shape_err)?;
        let r = Array2::from_shape_vec((h, w), slice(reference, h * w, "reference")?.to_vec()).map_err(shape_err)?;
        let valid = Array2::from_elem((h, w), true);
        *out = CwsReport::from(&metrics(&confusion(&p, &r, &valid)?)?);
        Ok(())
    })
}

/// Runs the command-line tool in-process with `argc` arguments (the first
/// being the program name) and returns its exit code.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cws_run_cli(argc: usize, argv: *const *const c_char) -> i32 {
    let args = match slice(argv, argc, "argv") {
        Ok(a) => a,
        Err(_) => return 2,
    };
    let mut owned = Vec::with_capacity(argc);
    for &a in args {
        if a.is_null() {
            return 2;
        }
        owned.push(CStr::from_ptr(a).to_string_lossy().into_owned());
    }
    catch_unwind(|| croplandws::cli::main_with_args(owned)).unwrap_or(4)
}
