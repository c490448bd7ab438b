//! C ABI over the temple-forge core.
//!
//! Every function returns a [`TfStatus`]; on failure the message is available
//! from [`tf_last_error_message`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_apply` and released with the matching
//! `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use temple_forge::dpo::{self, TokenPair, ToyModel};
use temple_forge::ingest::{downscale_dims, Frame};
use temple_forge::keyframer::laplacian_variance;
use temple_forge::pairset::validate_dataset;
use temple_forge::perturber::{apply, synthetic_clips, PerturbationKind, PerturbationSpec, PerturbedSequence};
use temple_forge::rng::derive_seed;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidDataset = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TfStatus, msg: impl Into<String>) -> TfStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into [`TfStatus::Panic`].
fn guard(f: impl FnOnce() -> TfStatus) -> TfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TfStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, TfStatus> {
    if p.is_null() {
        return Err(fail(TfStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TfStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], TfStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(TfStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

macro_rules! out_ptr {
    ($p:expr) => {
        if $p.is_null() {
            return fail(TfStatus::NullPointer, concat!(stringify!($p), " is null"));
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Per-(video, kind, level) perturbation seed.
///
/// # Safety
/// `video_id` and `kind` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_derive_seed(global_seed: u64, video_id: *const c_char, kind: *const c_char, r: u32, out: *mut u64) -> TfStatus {
    guard(|| {
        out_ptr!(out);
        let video_id = tri!(str_arg(video_id, "video_id"));
        let kind = tri!(str_arg(kind, "kind"));
        *out = derive_seed(global_seed, video_id, kind, r);
        TfStatus::Ok
    })
}

/// Frame dimensions after fitting a pixel budget.
///
/// # Safety
/// `out_width` and `out_height` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_downscale_dims(width: u32, height: u32, max_pixels: u64, out_width: *mut u32, out_height: *mut u32) -> TfStatus {
    guard(|| {
        out_ptr!(out_width);
        out_ptr!(out_height);
        if width == 0 || height == 0 || max_pixels == 0 {
            return fail(TfStatus::InvalidArgument, "dimensions and budget must be positive");
        }
        let (w, h) = downscale_dims(width, height, max_pixels);
        *out_width = w;
        *out_height = h;
        TfStatus::Ok
    })
}

/// Sharpness score of a packed RGB8 image.
///
/// # Safety
/// `rgb` must point to `width * height * 3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_laplacian_variance(rgb: *const u8, width: u32, height: u32, out: *mut f64) -> TfStatus {
    guard(|| {
        out_ptr!(out);
        let len = width as usize * height as usize * 3;
        if len == 0 {
            return fail(TfStatus::InvalidArgument, "empty image");
        }
        let data = tri!(slice_arg(rgb, len, "rgb"));
        let frame = Frame::new(0, 0.0, width, height, data.to_vec());
        match laplacian_variance(&frame) {
            Ok(v) => {
                *out = v;
                TfStatus::Ok
            }
            Err(e) => fail(TfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Opaque perturbation result.
pub struct TfPerturbation(PerturbedSequence);

/// Perturbs clips `0..n_clips`. `kind` is "drop", "shuffle" or "reverse".
///
/// # Safety
/// `kind` must be a NUL-terminated string; `out` must be writable. The
/// handle must be released with [`tf_perturbation_free`].
#[no_mangle]
pub unsafe extern "C" fn tf_perturbation_apply(n_clips: usize, kind: *const c_char, r: u32, seed: u64, out: *mut *mut TfPerturbation) -> TfStatus {
    guard(|| {
        out_ptr!(out);
        *out = ptr::null_mut();
        let kind: PerturbationKind = match tri!(str_arg(kind, "kind")).parse() {
            Ok(k) => k,
            Err(e) => return fail(TfStatus::InvalidArgument, format!("{e}")),
        };
        let result = PerturbationSpec::new(kind, r, seed).and_then(|spec| apply(&synthetic_clips(n_clips), &spec));
        match result {
            Ok(p) => {
                *out = Box::into_raw(Box::new(TfPerturbation(p)));
                TfStatus::Ok
            }
            Err(e) => fail(TfStatus::InvalidArgument, e.to_string()),
        }
    })
}

unsafe fn copy_out(src: &[usize], buf: *mut usize, cap: usize) -> TfStatus {
    if cap < src.len() {
        return fail(TfStatus::BufferTooSmall, format!("need {} slots, got {cap}", src.len()));
    }
    if !src.is_empty() {
        if buf.is_null() {
            return fail(TfStatus::NullPointer, "buf is null");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    }
    TfStatus::Ok
}

/// Number of output clip ids; 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tf_perturbation_len(p: *const TfPerturbation) -> usize {
    p.as_ref().map_or(0, |p| p.0.output_clip_ids.len())
}

/// Copies the output clip ids into `buf` (capacity `cap`).
///
/// # Safety
/// `p` must be a live handle; `buf` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn tf_perturbation_output(p: *const TfPerturbation, buf: *mut usize, cap: usize) -> TfStatus {
    guard(|| match p.as_ref() {
        Some(p) => copy_out(&p.0.output_clip_ids, buf, cap),
        None => fail(TfStatus::NullPointer, "perturbation handle is null"),
    })
}

/// Number of indivisible groups (0 for drop).
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tf_perturbation_group_count(p: *const TfPerturbation) -> usize {
    p.as_ref().map_or(0, |p| p.0.group_boundaries.len())
}

/// Copies the group sizes, in original order, into `buf`.
///
/// # Safety
/// `p` must be a live handle; `buf` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn tf_perturbation_group_sizes(p: *const TfPerturbation, buf: *mut usize, cap: usize) -> TfStatus {
    guard(|| match p.as_ref() {
        Some(p) => copy_out(&p.0.group_boundaries, buf, cap),
        None => fail(TfStatus::NullPointer, "perturbation handle is null"),
    })
}

/// Releases a perturbation handle. Null is ignored.
///
/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tf_perturbation_free(p: *mut TfPerturbation) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Opaque toy model.
pub struct TfToyModel(ToyModel);

/// Creates a `context_dim x vocab` model. `theta` may be null (all zeros) or
/// point to `context_dim * vocab` row-major values.
///
/// # Safety
/// `theta` must be null or valid for the stated length; `out` must be
/// writable. Release with [`tf_toy_model_free`].
#[no_mangle]
pub unsafe extern "C" fn tf_toy_model_new(vocab: usize, context_dim: usize, theta: *const f64, out: *mut *mut TfToyModel) -> TfStatus {
    guard(|| {
        out_ptr!(out);
        *out = ptr::null_mut();
        let model = if theta.is_null() {
            ToyModel::zeros(vocab, context_dim)
        } else {
            let values = tri!(slice_arg(theta, vocab.saturating_mul(context_dim), "theta"));
            ToyModel::from_theta(vocab, context_dim, values.to_vec())
        };
        match model {
            Ok(m) => {
                *out = Box::into_raw(Box::new(TfToyModel(m)));
                TfStatus::Ok
            }
            Err(e) => fail(TfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tf_toy_model_free(m: *mut TfToyModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Log-likelihood of `tokens` given `context`.
///
/// # Safety
/// Pointers must be valid for their lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_toy_model_logprob(
    m: *const TfToyModel,
    context: *const f64,
    context_len: usize,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f64,
) -> TfStatus {
    guard(|| {
        out_ptr!(out);
        let Some(m) = m.as_ref() else {
            return fail(TfStatus::NullPointer, "model handle is null");
        };
        let context = tri!(slice_arg(context, context_len, "context"));
        let tokens = tri!(slice_arg(tokens, n_tokens, "tokens"));
        match dpo::logprob(&m.0, context, tokens) {
            Ok(v) => {
                *out = v;
                TfStatus::Ok
            }
            Err(e) => fail(TfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Preference loss of a single pair under `policy` against `reference`.
///
/// # Safety
/// Handles must be live; pointers valid for their lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tf_dpo_loss(
    policy: *const TfToyModel,
    reference: *const TfToyModel,
    context: *const f64,
    context_len: usize,
    chosen: *const u32,
    n_chosen: usize,
    rejected: *const u32,
    n_rejected: usize,
    beta: f64,
    out: *mut f64,
) -> TfStatus {
    guard(|| {
        out_ptr!(out);
        let (Some(p), Some(r)) = (policy.as_ref(), reference.as_ref()) else {
            return fail(TfStatus::NullPointer, "model handle is null");
        };
        let pair = TokenPair {
            context: tri!(slice_arg(context, context_len, "context")).to_vec(),
            chosen: tri!(slice_arg(chosen, n_chosen, "chosen")).to_vec(),
            rejected: tri!(slice_arg(rejected, n_rejected, "rejected")).to_vec(),
            r: 0,
        };
        match dpo::dpo_loss(&p.0, &r.0, &[pair], beta) {
            Ok(v) => {
                *out = v;
                TfStatus::Ok
            }
            Err(e) => fail(TfStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Re-checks a dataset directory. On success writes the record count to
/// `out_total` (which may be null).
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out_total` null or writable.
#[no_mangle]
pub unsafe extern "C" fn tf_dataset_validate(dir: *const c_char, out_total: *mut usize) -> TfStatus {
    guard(|| {
        let dir = tri!(str_arg(dir, "dir"));
        match validate_dataset(Path::new(dir)) {
            Ok(report) => {
                if !out_total.is_null() {
                    *out_total = report.total;
                }
                TfStatus::Ok
            }
            Err(e) if e.is_input() => fail(TfStatus::Io, e.to_string()),
            Err(e) => fail(TfStatus::InvalidDataset, e.to_string()),
        }
    })
}
