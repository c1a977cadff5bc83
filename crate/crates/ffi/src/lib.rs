//! C ABI over `addmark`.
//!
//! Watermarks and dictionaries are opaque heap handles owned by the caller
//! and released with the matching `*_free`. Every fallible call returns an
//! [`AddmarkStatus`]; on failure the message is available from
//! [`addmark_last_error`] on the same thread until the next failing call.
//! Images are flat `C×H×W` arrays of `double` in the watermark's value range.
//! Messages are arrays of `int8_t` holding `-1` or `+1`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use addmark::codec::{self, Dictionary};
use addmark::tensor::{ImageTensor, Message};
use addmark::trainer::WatermarkSet;
use addmark::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddmarkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    TooFewScores = 6,
    Panic = 99,
}

/// Opaque watermark handle.
pub struct AddmarkWatermark(WatermarkSet);

/// Opaque message dictionary handle.
pub struct AddmarkDictionary(Dictionary);

/// Detection outcome. `dict_score` is NaN without a dictionary; the decoded
/// message goes to a separate caller buffer.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AddmarkDetection {
    pub score: f64,
    pub dict_score: f64,
    pub threshold: f64,
    pub detected: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AddmarkStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::DimensionMismatch { .. } | Error::BitCountMismatch { .. } => {
            AddmarkStatus::DimensionMismatch
        }
        Error::Io { .. } | Error::NoSuchDirectory(_) => AddmarkStatus::Io,
        Error::Format { .. } | Error::Image(_) | Error::Json(_) | Error::Csv(_) => AddmarkStatus::Format,
        Error::TooFewScores { .. } => AddmarkStatus::TooFewScores,
        _ => AddmarkStatus::InvalidArgument,
    }
}

struct Fail(AddmarkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AddmarkStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AddmarkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AddmarkStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AddmarkStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn view_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn utf8<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AddmarkStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn check_len(expected: usize, actual: usize, what: &str) -> Result<(), Fail> {
    if expected == actual {
        Ok(())
    } else {
        Err(Fail(
            AddmarkStatus::DimensionMismatch,
            format!("{what}: expected length {expected}, got {actual}"),
        ))
    }
}

fn image_for(w: &WatermarkSet, pixels: &[f64]) -> Result<ImageTensor, Fail> {
    let (c, h, wd) = w.shape();
    Ok(ImageTensor::new(c, h, wd, pixels.to_vec(), w.value_range())?)
}

fn gamma_for(w: &WatermarkSet, pixels: &[f64]) -> Result<Vec<f64>, Fail> {
    check_len(w.dim(), pixels.len(), "image")?;
    Ok(codec::inner_products_raw(pixels, w))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn addmark_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn addmark_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `.addwm` file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn addmark_watermark_load(
    path: *const c_char,
    out: *mut *mut AddmarkWatermark,
) -> AddmarkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = WatermarkSet::load(Path::new(utf8(path, "path")?))?;
        *out = Box::into_raw(Box::new(AddmarkWatermark(w)));
        Ok(())
    })
}

/// Parses the bytes of a `.addwm` file into `*out`.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn addmark_watermark_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut AddmarkWatermark,
) -> AddmarkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = WatermarkSet::from_bytes(view(data, len, "data")?)?;
        *out = Box::into_raw(Box::new(AddmarkWatermark(w)));
        Ok(())
    })
}

/// Releases a watermark. Null is ignored.
///
/// # Safety
/// `w` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn addmark_watermark_free(w: *mut AddmarkWatermark) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Number of message bits, or 0 for null.
///
/// # Safety
/// `w` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn addmark_watermark_bits(w: *const AddmarkWatermark) -> usize {
    w.as_ref().map_or(0, |w| w.0.bits())
}

/// Image length `C·H·W`, or 0 for null.
///
/// # Safety
/// `w` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn addmark_watermark_dim(w: *const AddmarkWatermark) -> usize {
    w.as_ref().map_or(0, |w| w.0.dim())
}

/// Writes channels, height and width into `shape[0..3]`.
///
/// # Safety
/// `w` must be a live handle and `shape` point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn addmark_watermark_shape(
    w: *const AddmarkWatermark,
    shape: *mut usize,
) -> AddmarkStatus {
    guard(|| {
        let w = &borrow(w, "watermark")?.0;
        let (c, h, wd) = w.shape();
        view_mut(shape, 3, "shape")?.copy_from_slice(&[c, h, wd]);
        Ok(())
    })
}

/// Adds `Σ_k m_k w_k` to `image` and writes the result to `out`
/// (which may alias `image`). With `clip`, pixels are clamped to the
/// watermark's value range.
///
/// # Safety
/// `image` and `out` must hold `len` doubles, `message` `bits` bytes.
#[no_mangle]
pub unsafe extern "C" fn addmark_embed(
    w: *const AddmarkWatermark,
    image: *const f64,
    len: usize,
    message: *const i8,
    bits: usize,
    clip: bool,
    out: *mut f64,
) -> AddmarkStatus {
    guard(|| {
        let w = &borrow(w, "watermark")?.0;
        check_len(w.dim(), len, "image")?;
        let x = image_for(w, view(image, len, "image")?)?;
        let m = Message::new(view(message, bits, "message")?.to_vec())?;
        let y = codec::embed(&x, &m, w, clip)?;
        view_mut(out, len, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Inner products of `image` with each watermark vector, into `gamma[0..bits]`.
///
/// # Safety
/// `image` must hold `len` doubles and `gamma` `bits` doubles.
#[no_mangle]
pub unsafe extern "C" fn addmark_inner_products(
    w: *const AddmarkWatermark,
    image: *const f64,
    len: usize,
    gamma: *mut f64,
    bits: usize,
) -> AddmarkStatus {
    guard(|| {
        let w = &borrow(w, "watermark")?.0;
        check_len(w.bits(), bits, "gamma")?;
        let g = gamma_for(w, view(image, len, "image")?)?;
        view_mut(gamma, bits, "gamma")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Bitwise sign decode of `gamma` into `message` (zero decodes to `+1`).
///
/// # Safety
/// `gamma` must hold `bits` doubles and `message` `bits` bytes.
#[no_mangle]
pub unsafe extern "C" fn addmark_decode_sign(
    gamma: *const f64,
    bits: usize,
    message: *mut i8,
) -> AddmarkStatus {
    guard(|| {
        if bits == 0 {
            return Err(Fail(AddmarkStatus::InvalidArgument, "bits must be positive".into()));
        }
        let m = codec::decode_sign(view(gamma, bits, "gamma")?);
        view_mut(message, bits, "message")?.copy_from_slice(m.bits());
        Ok(())
    })
}

/// Parses a dictionary: one message of `+`/`-` per line.
///
/// # Safety
/// `text` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn addmark_dictionary_parse(
    text: *const c_char,
    out: *mut *mut AddmarkDictionary,
) -> AddmarkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = Dictionary::parse(utf8(text, "text")?)?;
        *out = Box::into_raw(Box::new(AddmarkDictionary(d)));
        Ok(())
    })
}

/// Releases a dictionary. Null is ignored.
///
/// # Safety
/// `d` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn addmark_dictionary_free(d: *mut AddmarkDictionary) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Number of messages, or 0 for null.
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn addmark_dictionary_len(d: *const AddmarkDictionary) -> usize {
    d.as_ref().map_or(0, |d| d.0.len())
}

/// Best dictionary message for `gamma` and its score.
///
/// # Safety
/// `gamma` must hold `bits` doubles, `message` `bits` bytes; `score` may be null.
#[no_mangle]
pub unsafe extern "C" fn addmark_decode_dictionary(
    d: *const AddmarkDictionary,
    gamma: *const f64,
    bits: usize,
    message: *mut i8,
    score: *mut f64,
) -> AddmarkStatus {
    guard(|| {
        let d = &borrow(d, "dictionary")?.0;
        let (s, m) = codec::statistic_s_dict(view(gamma, bits, "gamma")?, d)?;
        view_mut(message, bits, "message")?.copy_from_slice(m.bits());
        if let Some(out) = score.as_mut() {
            *out = s;
        }
        Ok(())
    })
}

/// Detection score of an unwatermarked image, for calibration: the sum of
/// absolute inner products, or the dictionary score when `d` is non-null.
///
/// # Safety
/// `image` must hold `len` doubles; `d` may be null.
#[no_mangle]
pub unsafe extern "C" fn addmark_score(
    w: *const AddmarkWatermark,
    d: *const AddmarkDictionary,
    image: *const f64,
    len: usize,
    out: *mut f64,
) -> AddmarkStatus {
    guard(|| {
        let w = &borrow(w, "watermark")?.0;
        let g = gamma_for(w, view(image, len, "image")?)?;
        let s = codec::score(&g, d.as_ref().map(|d| &d.0))?;
        *out.as_mut().ok_or_else(|| null("out"))? = s;
        Ok(())
    })
}

/// Threshold whose exceed rate on `scores` is at most `alpha`.
///
/// # Safety
/// `scores` must hold `n` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn addmark_calibrate_threshold(
    scores: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> AddmarkStatus {
    guard(|| {
        let t = codec::calibrate_threshold(view(scores, n, "scores")?, alpha)?;
        *out.as_mut().ok_or_else(|| null("out"))? = t;
        Ok(())
    })
}

/// Detects against `threshold` and decodes. With a dictionary the decision
/// uses the dictionary score and the decoded message is a dictionary entry.
///
/// # Safety
/// `image` must hold `len` doubles, `message` `bits` bytes; `d` may be null.
#[no_mangle]
pub unsafe extern "C" fn addmark_detect(
    w: *const AddmarkWatermark,
    d: *const AddmarkDictionary,
    image: *const f64,
    len: usize,
    threshold: f64,
    result: *mut AddmarkDetection,
    message: *mut i8,
    bits: usize,
) -> AddmarkStatus {
    guard(|| {
        let w = &borrow(w, "watermark")?.0;
        check_len(w.bits(), bits, "message")?;
        let g = gamma_for(w, view(image, len, "image")?)?;
        let r = codec::detect(&g, d.as_ref().map(|d| &d.0), threshold)?;
        let out = result.as_mut().ok_or_else(|| null("result"))?;
        *out = AddmarkDetection {
            score: r.s,
            dict_score: r.s_dict.unwrap_or(f64::NAN),
            threshold: r.threshold_used,
            detected: r.decision,
        };
        view_mut(message, bits, "message")?.copy_from_slice(r.decoded.bits());
        Ok(())
    })
}
