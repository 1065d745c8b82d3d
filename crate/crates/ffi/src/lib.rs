//! C ABI over `tcs-core`.
//!
//! Objects cross the boundary as opaque handles created by `tcs_*_new` style
//! functions and released with the matching `tcs_*_free`. Every fallible call
//! returns a [`TcsStatus`]; on failure [`tcs_last_error`] describes the problem for
//! the calling thread. Strings handed out by the library are released with
//! [`tcs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tcs_core::classifier::{Classifier, ClassifierHandle};
use tcs_core::cli::CliConfig;
use tcs_core::eval::{prf1, Counts};
use tcs_core::explainer::{explain, Explanation};
use tcs_core::features::{FeatureDetection, SpecRegistry};
use tcs_core::imaging::{Image, PixelMask};
use tcs_core::pipeline::score_image;
use tcs_core::tcs::overlap_ratio;
use tcs_core::{synth, Error};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcsStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, wrong buffer length or an out-of-range index.
    InvalidArgument = 1,
    Io = 2,
    Backend = 3,
    Registry = 4,
    Dataset = 5,
    Config = 6,
    Image = 7,
    Internal = 99,
}

/// Decoded image.
pub struct TcsImage(Image);

/// Classifier built from a descriptor such as `bright-blob:person`, `quadrant` or
/// `subprocess:<command>`.
pub struct TcsClassifier(ClassifierHandle);

/// Ordered set of feature specifications.
pub struct TcsRegistry(SpecRegistry);

/// Explanation mask with its metadata.
pub struct TcsExplanation(Explanation);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TcsPrf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TcsStatus {
    match e {
        _ if e.is_backend() => TcsStatus::Backend,
        Error::Io { .. } => TcsStatus::Io,
        Error::Codec(_) | Error::InvalidImage(_) | Error::UnsupportedImage(_) | Error::DimensionMismatch { .. } => {
            TcsStatus::Image
        }
        Error::InvalidRegistry(_) | Error::DuplicateId(_) | Error::UnknownSpec(_) => TcsStatus::Registry,
        Error::InvalidDataset(_) | Error::EvaluationAborted { .. } => TcsStatus::Dataset,
        Error::InvalidConfig(_) | Error::Json(_) => TcsStatus::Config,
        Error::EmptyFeature(_) | Error::EmptyInput(_) | Error::OutOfBounds(_) => TcsStatus::InvalidArgument,
        _ => TcsStatus::Internal,
    }
}

struct Fail(TcsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TcsStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TcsStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = CString::new(s).map_err(|_| invalid("string contains nul"))?.into_raw();
    Ok(())
}

unsafe fn config_arg(p: *const c_char) -> Result<CliConfig, Fail> {
    if p.is_null() {
        return Ok(CliConfig::default());
    }
    let text = str_arg(p, "config")?;
    let mut cfg: CliConfig = serde_json::from_str(text).map_err(|e| Fail(TcsStatus::Config, e.to_string()))?;
    cfg.explainer.mutation.seed = cfg.seed;
    Ok(cfg)
}

unsafe fn mask_arg(p: *const u8, width: usize, height: usize, what: &str) -> Result<PixelMask, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    let bytes = std::slice::from_raw_parts(p, width * height);
    Ok(PixelMask::from_fn(width, height, |x, y| bytes[y * width + x] != 0))
}

/// Message for the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tcs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tcs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn tcs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Wraps `len` row-major samples with 1 or 3 channels.
///
/// # Safety
/// `id` must be a valid C string, `data` must point to `len` readable bytes and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_image_new(
    id: *const c_char,
    width: u32,
    height: u32,
    channels: u32,
    data: *const u8,
    len: usize,
    out: *mut *mut TcsImage,
) -> TcsStatus {
    guard(|| {
        let id = str_arg(id, "id")?;
        if data.is_null() {
            return Err(invalid("data is null"));
        }
        let bytes = std::slice::from_raw_parts(data, len).to_vec();
        let img = Image::new(id, width as usize, height as usize, channels as usize, bytes)?;
        put(out, TcsImage(img))
    })
}

/// Reads a PNG or binary PPM/PGM file.
///
/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_image_open(path: *const c_char, out: *mut *mut TcsImage) -> TcsStatus {
    guard(|| {
        let img = Image::open(str_arg(path, "path")?)?;
        put(out, TcsImage(img))
    })
}

/// # Safety
/// `img` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tcs_image_free(img: *mut TcsImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `descriptor` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_classifier_new(descriptor: *const c_char, out: *mut *mut TcsClassifier) -> TcsStatus {
    guard(|| {
        let h = ClassifierHandle::from_descriptor(str_arg(descriptor, "descriptor")?)?;
        put(out, TcsClassifier(h))
    })
}

/// # Safety
/// `cls` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tcs_classifier_free(cls: *mut TcsClassifier) {
    if !cls.is_null() {
        drop(Box::from_raw(cls));
    }
}

/// Predictions on `img` as a JSON array of `{label, confidence, bbox}`.
///
/// # Safety
/// Handles must be live and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_classify_json(
    cls: *const TcsClassifier,
    img: *const TcsImage,
    out_json: *mut *mut c_char,
) -> TcsStatus {
    guard(|| {
        let (cls, img) = (ref_arg(cls, "classifier")?, ref_arg(img, "image")?);
        let preds = cls.0.classify(&img.0)?;
        let json = serde_json::Value::Array(
            preds
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "label": p.label,
                        "confidence": p.confidence,
                        "bbox": p.bbox,
                    })
                })
                .collect(),
        );
        put_string(out_json, json.to_string())
    })
}

/// The face, hand and legs color-marker specifications used by the synthetic scenes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_registry_markers(out: *mut *mut TcsRegistry) -> TcsStatus {
    guard(|| put(out, TcsRegistry(synth::marker_registry())))
}

/// Parses a registry from its JSON array form.
///
/// # Safety
/// `json` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_registry_from_json(json: *const c_char, out: *mut *mut TcsRegistry) -> TcsStatus {
    guard(|| {
        let reg = SpecRegistry::from_json(str_arg(json, "json")?).map_err(|e| Fail(TcsStatus::Registry, e.to_string()))?;
        put(out, TcsRegistry(reg))
    })
}

/// # Safety
/// `reg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_registry_len(reg: *const TcsRegistry) -> usize {
    reg.as_ref().map_or(0, |r| r.0.len())
}

/// # Safety
/// `reg` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tcs_registry_free(reg: *mut TcsRegistry) {
    if !reg.is_null() {
        drop(Box::from_raw(reg));
    }
}

/// Explains, detects features and scores every prediction on `img`. `config_json`
/// may be null for defaults; otherwise it uses the CLI config schema. The result is
/// a JSON object with a `predictions` array of breakdowns.
///
/// # Safety
/// Handles must be live, `config_json` null or a valid C string, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_score_json(
    cls: *const TcsClassifier,
    reg: *const TcsRegistry,
    img: *const TcsImage,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> TcsStatus {
    guard(|| {
        let (cls, reg, img) = (ref_arg(cls, "classifier")?, ref_arg(reg, "registry")?, ref_arg(img, "image")?);
        let cfg = config_arg(config_json)?;
        let score = score_image(&cls.0, &reg.0, &img.0, None, &cfg.explainer, &cfg.tcs)?;
        let json = serde_json::json!({
            "image_id": score.image_id,
            "seed": cfg.seed,
            "detector_failures": score.detector_failures,
            "predictions": score.reports(),
        });
        put_string(out_json, json.to_string())
    })
}

/// Explains prediction number `index` of the classifier's output on `img`.
///
/// # Safety
/// Handles must be live, `config_json` null or a valid C string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_explain(
    cls: *const TcsClassifier,
    img: *const TcsImage,
    index: usize,
    config_json: *const c_char,
    out: *mut *mut TcsExplanation,
) -> TcsStatus {
    guard(|| {
        let (cls, img) = (ref_arg(cls, "classifier")?, ref_arg(img, "image")?);
        let cfg = config_arg(config_json)?;
        let preds = cls.0.classify(&img.0)?;
        let y = preds
            .get(index)
            .ok_or_else(|| invalid(format!("prediction {index} requested but only {} made", preds.len())))?;
        put(out, TcsExplanation(explain(&cls.0, &img.0, y, &cfg.explainer)?))
    })
}

/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_explanation_pixels_used(e: *const TcsExplanation) -> usize {
    e.as_ref().map_or(0, |e| e.0.pixels_used)
}

/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_explanation_converged(e: *const TcsExplanation) -> bool {
    e.as_ref().is_some_and(|e| e.0.converged)
}

/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_explanation_confidence(e: *const TcsExplanation) -> f64 {
    e.as_ref().map_or(0.0, |e| e.0.achieved_confidence)
}

/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_explanation_mutant_evaluations(e: *const TcsExplanation) -> usize {
    e.as_ref().map_or(0, |e| e.0.mutant_evaluations)
}

/// Copies the mask as one byte per pixel (1 explained, 0 not), row-major.
/// `len` must equal width × height of the explained image.
///
/// # Safety
/// `e` must be a live handle and `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tcs_explanation_mask(e: *const TcsExplanation, buf: *mut u8, len: usize) -> TcsStatus {
    guard(|| {
        let e = ref_arg(e, "explanation")?;
        let mask = &e.0.mask;
        if buf.is_null() || len != mask.len() {
            return Err(invalid(format!("buffer must hold {} bytes", mask.len())));
        }
        let out = std::slice::from_raw_parts_mut(buf, len);
        for (k, b) in out.iter_mut().enumerate() {
            *b = u8::from(mask.get_index(k));
        }
        Ok(())
    })
}

/// # Safety
/// `e` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn tcs_explanation_free(e: *mut TcsExplanation) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Percentage of the nonzero pixels of `feature` that are also nonzero in
/// `explanation`. Both masks hold one byte per pixel, row-major.
///
/// # Safety
/// Both buffers must hold `width * height` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_overlap_ratio(
    feature: *const u8,
    explanation: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> TcsStatus {
    guard(|| {
        let f = mask_arg(feature, width, height, "feature")?;
        let e = mask_arg(explanation, width, height, "explanation")?;
        let det = FeatureDetection::new("feature", f, 1.0)?;
        let r = overlap_ratio(&det, &e)?;
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        *out = r;
        Ok(())
    })
}

/// Precision, recall and F1 from raw counts, with 0/0 taken as 0.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_prf1(tp: usize, fp: usize, fn_: usize, out: *mut TcsPrf1) -> TcsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let s = prf1(Counts { tp, fp, fn_ });
        *out = TcsPrf1 {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        };
        Ok(())
    })
}
