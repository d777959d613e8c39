//! C ABI for `cascade-seg`.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `cs_*_new`/`cs_*_load` function and released by the matching `cs_*_free`.
//! Fallible functions return a [`CsStatus`] and write their result through
//! an out-pointer; on failure a description of the last error of the
//! calling thread is available from [`cs_last_error`]. Panics never unwind
//! into C: they are caught and reported as [`CsStatus::Panic`].
//!
//! Volumes are flat x-fastest arrays (`index = (z * ny + y) * nx + x`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cascade_seg::cascade::CascadeModel;
use cascade_seg::inference::{binarize_and_filter, predict_probability, ProbabilityMap};
use cascade_seg::metrics::{evaluate, EvalOptions};
use cascade_seg::phantom::{generate_case, PhantomConfig};
use cascade_seg::{BinaryMask, Dims, Error, MultiChannelCase, Volume};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// An argument was out of range or not valid UTF-8.
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A file or checkpoint was malformed.
    Format = 4,
    /// Shapes or configuration values were inconsistent.
    Config = 5,
    /// The channels of a case do not match the model.
    Channel = 6,
    /// A metric is undefined for the given masks.
    Evaluation = 7,
    /// The library panicked; the handle arguments should be discarded.
    Panic = 8,
}

/// A trained two-network cascade with its test parameters.
pub struct CsModel(CascadeModel);

/// One multi-channel case, optionally with a lesion mask.
pub struct CsCase(MultiChannelCase);

/// A voxel-wise lesion probability map.
pub struct CsProbMap(ProbabilityMap);

/// A binary mask.
pub struct CsMask(BinaryMask);

/// Per-case evaluation of a segmentation against a ground-truth mask.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsEvalReport {
    /// Absolute volume difference in percent of the ground-truth volume.
    pub vd: f64,
    /// Region-level true positive rate, percent.
    pub tpr: f64,
    /// Region-level false positive rate, percent.
    pub fpr: f64,
    /// Dice similarity coefficient, percent.
    pub dsc: f64,
    /// Positive predictive value, percent.
    pub ppv: f64,
    pub seg_vol_ml: f64,
    pub gt_vol_ml: f64,
    pub voxel_tp: u64,
    pub voxel_fp: u64,
    pub voxel_fn: u64,
    pub region_tp: u64,
    pub region_fn: u64,
    pub region_fp: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

struct Failure(CsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MissingFile(_) | Error::Io { .. } => CsStatus::Io,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::BadHeader(_)
            | Error::UnexpectedDtype { .. }
            | Error::TruncatedPayload { .. }
            | Error::TrailingData(_)
            | Error::BadCheckpoint(_) => CsStatus::Format,
            Error::ChannelMismatch { .. } | Error::MissingFlairChannel(_) => CsStatus::Channel,
            Error::EmptyGroundTruth | Error::UndefinedRatio(_) | Error::DegenerateVariance => CsStatus::Evaluation,
            _ => CsStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(CsStatus::InvalidArgument, message.into())
}

fn null(name: &str) -> Failure {
    Failure(CsStatus::NullPointer, format!("{name} is NULL"))
}

/// Runs `f`, mapping errors and panics to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            CsStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn string_arg(p: *const c_char, name: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn dims_arg(dims: *const usize) -> Result<Dims, Failure> {
    let d = as_ref(dims as *const [usize; 3], "dims")?;
    let dims = Dims::new(d[0], d[1], d[2]);
    dims.validate()?;
    Ok(dims)
}

unsafe fn voxel_size_arg(voxel_size: *const f32) -> Result<[f32; 3], Failure> {
    if voxel_size.is_null() {
        return Ok([1.0; 3]);
    }
    Ok(*(voxel_size as *const [f32; 3]))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or NULL when no call has
/// failed yet. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn cs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a model directory written by `cascade-seg train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_model_load(dir: *const c_char, out: *mut *mut CsModel) -> CsStatus {
    guard(|| {
        let dir = PathBuf::from(string_arg(dir, "dir")?);
        let model = CascadeModel::load(dir)?;
        write_out(out, CsModel(model))
    })
}

/// Test parameters stored with the model.
///
/// # Safety
/// `model` must be a live handle; `t_bin` and `l_min` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_model_params(model: *const CsModel, t_bin: *mut f64, l_min: *mut usize) -> CsStatus {
    guard(|| {
        let model = &as_ref(model, "model")?.0;
        if t_bin.is_null() || l_min.is_null() {
            return Err(null("t_bin/l_min"));
        }
        *t_bin = model.t_bin;
        *l_min = model.l_min;
        Ok(())
    })
}

/// Number of input channels the model expects.
///
/// # Safety
/// `model` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn cs_model_channel_count(model: *const CsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.channel_order.len())
}

/// Name of input channel `index` of the model, or NULL when out of range.
/// The string is owned by the caller and released with [`cs_string_free`].
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cs_model_channel_name(model: *const CsModel, index: usize) -> *mut c_char {
    model
        .as_ref()
        .and_then(|m| m.0.channel_order.get(index))
        .and_then(|name| CString::new(name.as_str()).ok())
        .map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `model` must be NULL or a handle that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cs_model_free(model: *mut CsModel) {
    free(model)
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not freed yet.
#[no_mangle]
pub unsafe extern "C" fn cs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a case from `n_channels` named intensity volumes of `dims`
/// voxels each. `voxel_size` (3 floats, mm) may be NULL for 1 mm voxels;
/// `mask` (one 0/1 byte per voxel) may be NULL. The data is copied.
///
/// # Safety
/// `case_id` and every `names[i]` must be NUL-terminated strings, `dims`
/// must point to 3 values, each `data[i]` to `dims[0]*dims[1]*dims[2]`
/// floats, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_case_new(
    case_id: *const c_char,
    dims: *const usize,
    voxel_size: *const f32,
    names: *const *const c_char,
    data: *const *const f32,
    n_channels: usize,
    mask: *const u8,
    out: *mut *mut CsCase,
) -> CsStatus {
    guard(|| {
        let id = string_arg(case_id, "case_id")?;
        let dims = dims_arg(dims)?;
        let voxel_size = voxel_size_arg(voxel_size)?;
        let names = slice_arg(names, n_channels, "names")?;
        let data = slice_arg(data, n_channels, "data")?;
        let mut channels = Vec::with_capacity(n_channels);
        for (&name, &values) in names.iter().zip(data) {
            let name = string_arg(name, "channel name")?;
            let values = slice_arg(values, dims.len(), "channel data")?;
            channels.push((name, Volume::new(dims, voxel_size, values.to_vec())?));
        }
        let mask = if mask.is_null() {
            None
        } else {
            Some(BinaryMask::new(dims, voxel_size, slice_arg(mask, dims.len(), "mask")?.to_vec())?)
        };
        write_out(out, CsCase(MultiChannelCase::new(id, channels, mask)?))
    })
}

/// Generates synthetic case `index` of the phantom cohort with `seed`:
/// a cube of `edge` voxels with T1 and FLAIR channels and a lesion mask.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_phantom_case(edge: usize, seed: u64, index: usize, out: *mut *mut CsCase) -> CsStatus {
    guard(|| {
        let cfg = PhantomConfig { dims: Dims::cube(edge), seed, ..Default::default() };
        write_out(out, CsCase(generate_case(&cfg, index)?))
    })
}

/// Copies the lesion mask of a case into a new handle.
///
/// # Safety
/// `case` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_case_mask(case: *const CsCase, out: *mut *mut CsMask) -> CsStatus {
    guard(|| {
        let case = &as_ref(case, "case")?.0;
        let mask = case.require_mask()?.clone();
        write_out(out, CsMask(mask))
    })
}

/// Number of voxels of a case, or 0 for NULL.
///
/// # Safety
/// `case` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cs_case_len(case: *const CsCase) -> usize {
    case.as_ref().map_or(0, |c| c.0.dims().len())
}

/// # Safety
/// `case` must be NULL or a handle that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cs_case_free(case: *mut CsCase) {
    free(case)
}

/// Runs both cascade stages on a case (raw intensities; every channel is
/// z-score normalized first) and returns the final probability map.
///
/// # Safety
/// `model` and `case` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_predict(model: *const CsModel, case: *const CsCase, out: *mut *mut CsProbMap) -> CsStatus {
    guard(|| {
        let model = &as_ref(model, "model")?.0;
        let case = &as_ref(case, "case")?.0;
        let prob = predict_probability(model, &case.normalized()?)?;
        write_out(out, CsProbMap(prob))
    })
}

/// Wraps caller-supplied probabilities (each in [0, 1]); the data is copied.
///
/// # Safety
/// `dims` must point to 3 values, `data` to `dims[0]*dims[1]*dims[2]`
/// floats, `voxel_size` to 3 floats or NULL; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_probmap_new(
    dims: *const usize,
    voxel_size: *const f32,
    data: *const f32,
    out: *mut *mut CsProbMap,
) -> CsStatus {
    guard(|| {
        let dims = dims_arg(dims)?;
        let voxel_size = voxel_size_arg(voxel_size)?;
        let values = slice_arg(data, dims.len(), "data")?;
        write_out(out, CsProbMap(ProbabilityMap::new(dims, voxel_size, values.to_vec())?))
    })
}

/// Number of voxels of a map, or 0 for NULL.
///
/// # Safety
/// `map` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cs_probmap_len(map: *const CsProbMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.data().len())
}

/// Borrowed pointer to the probabilities, valid while the handle lives.
///
/// # Safety
/// `map` must be a live handle or NULL (which yields NULL).
#[no_mangle]
pub unsafe extern "C" fn cs_probmap_data(map: *const CsProbMap) -> *const f32 {
    map.as_ref().map_or(ptr::null(), |m| m.0.data().as_ptr())
}

/// # Safety
/// `map` must be NULL or a handle that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cs_probmap_free(map: *mut CsProbMap) {
    free(map)
}

/// Thresholds a map at `t_bin` (probability >= `t_bin`) and removes
/// 26-connected regions smaller than `l_min` voxels.
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_segment(map: *const CsProbMap, t_bin: f64, l_min: usize, out: *mut *mut CsMask) -> CsStatus {
    guard(|| {
        let map = &as_ref(map, "map")?.0;
        if !(0.0..=1.0).contains(&t_bin) {
            return Err(invalid(format!("t_bin {t_bin} outside [0, 1]")));
        }
        write_out(out, CsMask(binarize_and_filter(map, t_bin, l_min).binary))
    })
}

/// Wraps a caller-supplied 0/1 mask; the data is copied.
///
/// # Safety
/// `dims` must point to 3 values, `data` to `dims[0]*dims[1]*dims[2]`
/// bytes, `voxel_size` to 3 floats or NULL; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_new(
    dims: *const usize,
    voxel_size: *const f32,
    data: *const u8,
    out: *mut *mut CsMask,
) -> CsStatus {
    guard(|| {
        let dims = dims_arg(dims)?;
        let voxel_size = voxel_size_arg(voxel_size)?;
        let values = slice_arg(data, dims.len(), "data")?;
        write_out(out, CsMask(BinaryMask::new(dims, voxel_size, values.to_vec())?))
    })
}

/// Number of voxels of a mask, or 0 for NULL.
///
/// # Safety
/// `mask` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_len(mask: *const CsMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.data().len())
}

/// Number of foreground voxels, or 0 for NULL.
///
/// # Safety
/// `mask` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_count(mask: *const CsMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.count())
}

/// Borrowed pointer to the 0/1 bytes, valid while the handle lives.
///
/// # Safety
/// `mask` must be a live handle or NULL (which yields NULL).
#[no_mangle]
pub unsafe extern "C" fn cs_mask_data(mask: *const CsMask) -> *const u8 {
    mask.as_ref().map_or(ptr::null(), |m| m.0.data().as_ptr())
}

/// # Safety
/// `mask` must be NULL or a handle that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cs_mask_free(mask: *mut CsMask) {
    free(mask)
}

/// Evaluates `seg` against `gt`. Regions count as detected when they share
/// at least one voxel and the shared voxels make up at least `min_overlap`
/// (0..=1) of the region. Undefined rates are reported as 0.
///
/// # Safety
/// `seg` and `gt` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_evaluate(
    seg: *const CsMask,
    gt: *const CsMask,
    min_overlap: f64,
    out: *mut CsEvalReport,
) -> CsStatus {
    guard(|| {
        let seg = &as_ref(seg, "seg")?.0;
        let gt = &as_ref(gt, "gt")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if !(0.0..=1.0).contains(&min_overlap) {
            return Err(invalid(format!("min_overlap {min_overlap} outside [0, 1]")));
        }
        let r = evaluate("", seg, gt, EvalOptions { min_overlap, ..Default::default() })?;
        *out = CsEvalReport {
            vd: r.vd,
            tpr: r.tpr,
            fpr: r.fpr,
            dsc: r.dsc,
            ppv: r.ppv,
            seg_vol_ml: r.seg_vol_ml,
            gt_vol_ml: r.gt_vol_ml,
            voxel_tp: r.voxels.tp as u64,
            voxel_fp: r.voxels.fp as u64,
            voxel_fn: r.voxels.fn_ as u64,
            region_tp: r.regions.tp as u64,
            region_fn: r.regions.fn_ as u64,
            region_fp: r.regions.fp as u64,
        };
        Ok(())
    })
}
