//! C ABI over the segmentation engine.
//!
//! Objects cross the boundary as opaque handles created by `*_load`/`*_read`
//! functions and released by the matching `*_free`. Every fallible function
//! returns a [`GsegStatus`]; on failure the message is kept per thread and can
//! be fetched with [`gseg_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gseg::arch::NetworkSpec;
use gseg::data::layout::{self, LayoutError};
use gseg::data::{generate_phantom, inverse_remap_labels, PhantomSpec, PreprocessedSample};
use gseg::nifti::{read_nifti_file, write_nifti_file, NiftiError, NiftiVolume};
use gseg::train::{load_checkpoint, predict_mask, TrainError};
use gseg::{LabelMask, ParamStore, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Nifti = 4,
    Checkpoint = 5,
    Shape = 6,
    Model = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A trained network restored from a checkpoint.
pub struct GsegModel {
    net: NetworkSpec,
    params: ParamStore<f32>,
}

/// A NIfTI-1 volume.
pub struct GsegVolume {
    inner: NiftiVolume,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GsegStatus, String);

impl Failure {
    fn new(status: GsegStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<NiftiError> for Failure {
    fn from(e: NiftiError) -> Self {
        let status = match e {
            NiftiError::Io { .. } => GsegStatus::Io,
            _ => GsegStatus::Nifti,
        };
        Failure(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match e {
            TrainError::Io { .. } => GsegStatus::Io,
            TrainError::Checkpoint(_) => GsegStatus::Checkpoint,
            TrainError::Tensor(_) | TrainError::SampleShape { .. } => GsegStatus::Shape,
            _ => GsegStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

impl From<LayoutError> for Failure {
    fn from(e: LayoutError) -> Self {
        match e {
            LayoutError::Nifti(n) => n.into(),
            LayoutError::Io { .. } => Failure(GsegStatus::Io, e.to_string()),
            _ => Failure(GsegStatus::InvalidArgument, e.to_string()),
        }
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GsegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GsegStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::new(GsegStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(GsegStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn dims_arg(dims: *const usize, rank: usize) -> Result<Vec<usize>, Failure> {
    non_null(dims, "dims")?;
    if rank == 0 {
        return Err(Failure::new(GsegStatus::InvalidArgument, "rank must be positive"));
    }
    Ok(std::slice::from_raw_parts(dims, rank).to_vec())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, without the
/// terminating NUL; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn gseg_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated).
///
/// # Safety
/// `buf` must be valid for `cap` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn gseg_last_error_message(buf: *mut c_char, cap: usize) -> GsegStatus {
    if buf.is_null() {
        return GsegStatus::NullPointer;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        if cap < bytes.len() + 1 {
            return GsegStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        GsegStatus::Ok
    })
}

/// Restores a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gseg_model_load(path: *const c_char, out: *mut *mut GsegModel) -> GsegStatus {
    guard(|| {
        non_null(out, "out")?;
        let state = load_checkpoint(&path_arg(path)?)?;
        let net = state.network()?;
        let model = Box::new(GsegModel {
            net,
            params: state.params,
        });
        *out = Box::into_raw(model);
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`gseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gseg_model_free(model: *mut GsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of spatial axes the model expects (2 or 3).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gseg_model_rank(model: *const GsegModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.rank.dims())
}

/// Segments one channels-last image `x` of shape `[dims.., 4]` (modalities
/// flair, t1, t1ce, t2) into `out`, one label in {0, 1, 2, 4} per voxel.
///
/// # Safety
/// `x` must hold `prod(dims) * 4` floats, `dims` `rank` entries and `out`
/// `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gseg_model_segment(
    model: *const GsegModel,
    x: *const f32,
    dims: *const usize,
    rank: usize,
    out: *mut u8,
    out_len: usize,
) -> GsegStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(x, "x")?;
        non_null(out, "out")?;
        let m = &*model;
        let spatial = dims_arg(dims, rank)?;
        if rank != m.net.rank.dims() {
            return Err(Failure::new(
                GsegStatus::Shape,
                format!("model takes {} spatial axes, got {rank}", m.net.rank.dims()),
            ));
        }
        let voxels: usize = spatial.iter().product();
        if out_len < voxels {
            return Err(Failure::new(
                GsegStatus::BufferTooSmall,
                format!("output holds {out_len} labels, need {voxels}"),
            ));
        }
        let mut shape = spatial.clone();
        shape.push(m.net.in_channels);
        let data = std::slice::from_raw_parts(x, voxels * m.net.in_channels).to_vec();
        let x = Tensor::new(shape, data).map_err(|e| Failure::new(GsegStatus::Shape, e.to_string()))?;
        let sample = PreprocessedSample::new("ffi", x, LabelMask::zeros(&spatial))
            .map_err(|e| Failure::new(GsegStatus::Shape, e.to_string()))?;
        let mask = predict_mask(&m.net, &m.params, &sample)?;
        let raw = inverse_remap_labels(&mask).map_err(|e| Failure::new(GsegStatus::Model, e.to_string()))?;
        std::slice::from_raw_parts_mut(out, voxels).copy_from_slice(raw.labels());
        Ok(())
    })
}

/// Reads a `.nii` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gseg_volume_read(path: *const c_char, out: *mut *mut GsegVolume) -> GsegStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = read_nifti_file(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(GsegVolume { inner }));
        Ok(())
    })
}

/// Builds a uint8 label volume from row-major labels (last axis fastest).
///
/// # Safety
/// `labels` must hold `prod(dims)` bytes and `dims` `rank` entries.
#[no_mangle]
pub unsafe extern "C" fn gseg_volume_from_labels(
    labels: *const u8,
    dims: *const usize,
    rank: usize,
    out: *mut *mut GsegVolume,
) -> GsegStatus {
    guard(|| {
        non_null(labels, "labels")?;
        non_null(out, "out")?;
        let shape = dims_arg(dims, rank)?;
        let n = shape.iter().product();
        let mask = LabelMask::new(shape, std::slice::from_raw_parts(labels, n).to_vec())
            .map_err(|e| Failure::new(GsegStatus::Shape, e.to_string()))?;
        let inner = NiftiVolume::from_mask(&mask)?;
        *out = Box::into_raw(Box::new(GsegVolume { inner }));
        Ok(())
    })
}

/// Writes a volume as little-endian NIfTI-1.
///
/// # Safety
/// `volume` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gseg_volume_write(volume: *const GsegVolume, path: *const c_char) -> GsegStatus {
    guard(|| {
        non_null(volume, "volume")?;
        write_nifti_file(&path_arg(path)?, &(*volume).inner)?;
        Ok(())
    })
}

/// Number of axes of a volume; 0 for a null handle.
///
/// # Safety
/// `volume` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gseg_volume_rank(volume: *const GsegVolume) -> usize {
    volume.as_ref().map_or(0, |v| v.inner.shape().len())
}

/// Copies the extents of each axis into `dims`.
///
/// # Safety
/// `volume` must be a live handle and `dims` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn gseg_volume_dims(volume: *const GsegVolume, dims: *mut usize, cap: usize) -> GsegStatus {
    guard(|| {
        non_null(volume, "volume")?;
        non_null(dims, "dims")?;
        let shape = (*volume).inner.shape();
        if cap < shape.len() {
            return Err(Failure::new(GsegStatus::BufferTooSmall, format!("{} axes", shape.len())));
        }
        std::slice::from_raw_parts_mut(dims, shape.len()).copy_from_slice(&shape);
        Ok(())
    })
}

/// Copies the voxels, scaled and converted to float, in row-major order.
///
/// # Safety
/// `volume` must be a live handle and `out` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn gseg_volume_to_f32(volume: *const GsegVolume, out: *mut f32, len: usize) -> GsegStatus {
    guard(|| {
        non_null(volume, "volume")?;
        non_null(out, "out")?;
        let t = (*volume).inner.to_tensor()?;
        if len < t.len() {
            return Err(Failure::new(GsegStatus::BufferTooSmall, format!("{} voxels", t.len())));
        }
        std::slice::from_raw_parts_mut(out, t.len()).copy_from_slice(t.data());
        Ok(())
    })
}

/// # Safety
/// `volume` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gseg_volume_free(volume: *mut GsegVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Writes `count` synthetic cases of `size`^3 voxels under `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gseg_phantom_write(dir: *const c_char, count: usize, size: usize, seed: u64) -> GsegStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        if count == 0 || size == 0 {
            return Err(Failure::new(GsegStatus::InvalidArgument, "count and size must be positive"));
        }
        for i in 0..count {
            let spec = PhantomSpec::cube(format!("phantom{i:03}"), size, seed.wrapping_add(i as u64));
            let case = generate_phantom(&spec).map_err(|e| Failure::new(GsegStatus::InvalidArgument, e.to_string()))?;
            layout::write_case(&dir, &case)?;
        }
        Ok(())
    })
}
