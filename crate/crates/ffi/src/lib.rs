//! C ABI over `bragg-core`.
//!
//! Objects cross the boundary as opaque handles (`BraggModel`, `BraggFrames`,
//! `BraggPeaks`) created by `*_load` / `*_read` / `*_init` / `bragg_localize`
//! and released with the matching `*_free`. Every fallible call returns a
//! `BraggStatus`; on failure `bragg_last_error()` describes the problem. The
//! message belongs to the calling thread and stays valid until that thread's
//! next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bragg_core::braggnn::{self, ArchSpec, ModelWeights};
use bragg_core::evaluator::{localize_patches, Localizer};
use bragg_core::frame_io::{self, FrameStack, PeakRecord};
use bragg_core::segment::segment_stack;
use bragg_core::voigtfit::{fit_values, LMOptions};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BraggStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numerical = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BraggMethod {
    VoigtFit = 0,
    BraggNN = 1,
    Maxima = 2,
}

/// Trained (or freshly initialized) network weights.
pub struct BraggModel(ModelWeights);

/// A stack of detector frames.
pub struct BraggFrames(FrameStack);

/// Peak list produced by `bragg_localize`.
pub struct BraggPeaks(Vec<PeakRecord>);

/// One localized peak. `center_y` is the column, `center_z` the row, both in
/// frame pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BraggPeak {
    pub frame_index: usize,
    pub center_y: f64,
    pub center_z: f64,
    pub amplitude: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(BraggStatus, String);

impl From<frame_io::FrameIoError> for Failure {
    fn from(e: frame_io::FrameIoError) -> Self {
        let status = match e {
            frame_io::FrameIoError::Io(_) => BraggStatus::Io,
            _ => BraggStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<braggnn::BraggError> for Failure {
    fn from(e: braggnn::BraggError) -> Self {
        use braggnn::BraggError as E;
        let status = match e {
            E::Io(_) => BraggStatus::Io,
            E::BadMagic(_) | E::Version(_) | E::TensorCount { .. } | E::Truncated => BraggStatus::Format,
            E::NonFinite(_) => BraggStatus::Numerical,
            E::Arch(_) => BraggStatus::InvalidArgument,
            _ => BraggStatus::Shape,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status plus thread-local message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BraggStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BraggStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            BraggStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BraggStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure(BraggStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

/// Message for the calling thread's most recent failure ("" if none).
#[no_mangle]
pub extern "C" fn bragg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bragg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `BNNW` weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bragg_model_load(path: *const c_char, out: *mut *mut BraggModel) -> BraggStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = braggnn::load_weights(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(BraggModel(w)));
        Ok(())
    })
}

/// Freshly initialized default-architecture network (patch 11).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bragg_model_init(attention: c_int, seed: u64, out: *mut *mut BraggModel) -> BraggStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch = ArchSpec { attention_enabled: attention != 0, ..ArchSpec::default() };
        *out = Box::into_raw(Box::new(BraggModel(ModelWeights::init(&arch, seed)?)));
        Ok(())
    })
}

/// Writes the model as a `BNNW` file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bragg_model_save(model: *const BraggModel, path: *const c_char) -> BraggStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        braggnn::save_weights(&m.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Patch side length the model expects, or 0 for a NULL model.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bragg_model_patch_size(model: *const BraggModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.arch.patch_size)
}

/// # Safety
/// `model` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bragg_model_free(model: *mut BraggModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts `(y, z)` patch-coordinate centers for `n` row-major patches of
/// `patch_size^2` values each; writes `2 n` values to `centers`.
///
/// # Safety
/// `patches` must hold `n * patch_size^2` doubles and `centers` room for `2 n`.
#[no_mangle]
pub unsafe extern "C" fn bragg_model_predict(
    model: *const BraggModel,
    patches: *const f64,
    n: usize,
    centers: *mut f64,
) -> BraggStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n == 0 {
            return Ok(());
        }
        if patches.is_null() || centers.is_null() {
            return Err(null("patches or centers"));
        }
        let area = m.0.arch.patch_size * m.0.arch.patch_size;
        let input = std::slice::from_raw_parts(patches, n * area);
        let pred = braggnn::predict(&m.0, input, n)?;
        std::slice::from_raw_parts_mut(centers, 2 * n).copy_from_slice(&pred);
        Ok(())
    })
}

/// Fits a pseudo-Voigt profile to one `size x size` patch. `params` receives
/// `(bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z)`; `converged` may be NULL.
///
/// # Safety
/// `values` must hold `size^2` doubles and `params` room for 7.
#[no_mangle]
pub unsafe extern "C" fn bragg_fit_patch(
    values: *const f64,
    size: usize,
    params: *mut f64,
    converged: *mut c_int,
) -> BraggStatus {
    guard(|| {
        if values.is_null() || params.is_null() {
            return Err(null("values or params"));
        }
        if size == 0 {
            return Err(Failure(BraggStatus::InvalidArgument, "size must be positive".into()));
        }
        let v = std::slice::from_raw_parts(values, size * size);
        let r = fit_values(v, size, &LMOptions::default()).map_err(|e| Failure(BraggStatus::Numerical, e.to_string()))?;
        std::slice::from_raw_parts_mut(params, 7).copy_from_slice(&r.params.to_array());
        if !converged.is_null() {
            *converged = r.converged as c_int;
        }
        Ok(())
    })
}

/// Reads a `BFRM` frame stack.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bragg_frames_read(path: *const c_char, out: *mut *mut BraggFrames) -> BraggStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = frame_io::read_frames(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(BraggFrames(s)));
        Ok(())
    })
}

/// Number of frames, or 0 for NULL.
///
/// # Safety
/// `frames` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bragg_frames_count(frames: *const BraggFrames) -> usize {
    frames.as_ref().map_or(0, |f| f.0.len())
}

/// Width and height shared by all frames.
///
/// # Safety
/// `frames` must come from this library; `width` and `height` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bragg_frames_dims(frames: *const BraggFrames, width: *mut usize, height: *mut usize) -> BraggStatus {
    guard(|| {
        let f = frames.as_ref().ok_or_else(|| null("frames"))?;
        if width.is_null() || height.is_null() {
            return Err(null("width or height"));
        }
        let (w, h) = f.0.dims().ok_or_else(|| Failure(BraggStatus::InvalidArgument, "stack is empty".into()))?;
        *width = w;
        *height = h;
        Ok(())
    })
}

/// Copies frame `index` (row-major counts) into `out`, which holds `len` floats.
///
/// # Safety
/// `frames` must come from this library; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn bragg_frames_copy(frames: *const BraggFrames, index: usize, out: *mut f32, len: usize) -> BraggStatus {
    guard(|| {
        let f = frames.as_ref().ok_or_else(|| null("frames"))?;
        let frame = f.0.frames.get(index).ok_or_else(|| {
            Failure(BraggStatus::InvalidArgument, format!("frame {index} out of range (stack has {})", f.0.len()))
        })?;
        if len != frame.counts.len() {
            return Err(Failure(BraggStatus::Shape, format!("buffer holds {len} values, frame has {}", frame.counts.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&frame.counts);
        Ok(())
    })
}

/// # Safety
/// `frames` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bragg_frames_free(frames: *mut BraggFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}

/// Segments every frame (robust default threshold), localizes each
/// single-maximum peak with `method`, and returns the peak list. `model` is
/// required for `BRAGG_METHOD_BRAGG_NN` and ignored otherwise; patches use
/// the model's patch size, or `patch_size` for the other methods.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bragg_localize(
    frames: *const BraggFrames,
    method: BraggMethod,
    model: *const BraggModel,
    patch_size: usize,
    out: *mut *mut BraggPeaks,
) -> BraggStatus {
    guard(|| {
        let f = frames.as_ref().ok_or_else(|| null("frames"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (loc, size) = match method {
            BraggMethod::BraggNN => {
                let m = model.as_ref().ok_or_else(|| null("model"))?;
                (Localizer::BraggNN(&m.0), m.0.arch.patch_size)
            }
            BraggMethod::VoigtFit => (Localizer::VoigtFit(LMOptions::default()), patch_size),
            BraggMethod::Maxima => (Localizer::Maxima, patch_size),
        };
        if size % 2 == 0 || size < 3 {
            return Err(Failure(BraggStatus::InvalidArgument, format!("patch size {size} must be odd and >= 3")));
        }
        let patches: Vec<_> = segment_stack(&f.0, None, size).into_iter().flat_map(|c| c.patches).collect();
        let peaks = localize_patches(&loc, &patches)
            .map_err(|e| Failure(BraggStatus::Shape, e.to_string()))?
            .into_iter()
            .flatten()
            .collect();
        *out = Box::into_raw(Box::new(BraggPeaks(peaks)));
        Ok(())
    })
}

/// Number of peaks, or 0 for NULL.
///
/// # Safety
/// `peaks` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bragg_peaks_count(peaks: *const BraggPeaks) -> usize {
    peaks.as_ref().map_or(0, |p| p.0.len())
}

/// Copies peak `index` into `out`.
///
/// # Safety
/// `peaks` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bragg_peaks_get(peaks: *const BraggPeaks, index: usize, out: *mut BraggPeak) -> BraggStatus {
    guard(|| {
        let p = peaks.as_ref().ok_or_else(|| null("peaks"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = p.0.get(index).ok_or_else(|| {
            Failure(BraggStatus::InvalidArgument, format!("peak {index} out of range (list has {})", p.0.len()))
        })?;
        ptr::write(
            out,
            BraggPeak { frame_index: r.frame_index, center_y: r.center_y, center_z: r.center_z, amplitude: r.amplitude },
        );
        Ok(())
    })
}

/// # Safety
/// `peaks` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bragg_peaks_free(peaks: *mut BraggPeaks) {
    if !peaks.is_null() {
        drop(Box::from_raw(peaks));
    }
}
