//! C ABI over the maskcap library.
//!
//! Every fallible function returns a [`MaskcapStatus`]. On failure a
//! description is kept per thread and can be read with
//! [`maskcap_last_error`]. Handles are opaque and must be released with the
//! matching `*_free` function. Panics never cross the boundary; they are
//! reported as [`MaskcapStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use maskcap::checkpoint::Checkpoint;
use maskcap::data::{load_dataset, Dataset};
use maskcap::decode::{generate, DecodeOptions};
use maskcap::model::{ModelKind, SceneInput};
use maskcap::numkern::Tensor;
use maskcap::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskcapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Parse = 5,
    Schema = 6,
    Checkpoint = 7,
    Dimension = 8,
    Domain = 9,
    NonFinite = 10,
    Lookup = 11,
    Config = 12,
    Panic = 13,
}

impl From<&Error> for MaskcapStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => MaskcapStatus::Dimension,
            Error::Domain(_) => MaskcapStatus::Domain,
            Error::NonFinite(_) => MaskcapStatus::NonFinite,
            Error::Parse { .. } => MaskcapStatus::Parse,
            Error::Schema { .. } => MaskcapStatus::Schema,
            Error::Lookup(_) => MaskcapStatus::Lookup,
            Error::Config(_) => MaskcapStatus::Config,
            Error::Checkpoint(_) => MaskcapStatus::Checkpoint,
            Error::Io { .. } => MaskcapStatus::Io,
        }
    }
}

/// A loaded checkpoint.
pub struct MaskcapModel {
    ckpt: Checkpoint,
}

/// A loaded dataset split.
pub struct MaskcapDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MaskcapStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MaskcapStatus::from(&e), e.to_string())
    }
}

fn fail(status: MaskcapStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MaskcapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MaskcapStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
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
            MaskcapStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(fail(MaskcapStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(MaskcapStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MaskcapStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(MaskcapStatus::NullPointer, format!("`{name}` is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(MaskcapStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn maskcap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskcap_model_load(path: *const c_char, out: *mut *mut MaskcapModel) -> MaskcapStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ckpt = Checkpoint::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MaskcapModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`maskcap_model_load`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn maskcap_model_free(model: *mut MaskcapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model dimensions. Any output pointer may be NULL.
///
/// # Safety
/// `model` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskcap_model_dims(
    model: *const MaskcapModel,
    slots: *mut usize,
    entity_dim: *mut usize,
    global_dim: *mut usize,
    vocab: *mut usize,
) -> MaskcapStatus {
    guard(|| {
        let c = &ref_arg(model, "model")?.ckpt.model.config;
        for (p, v) in [(slots, c.slots), (entity_dim, c.entity_dim), (global_dim, c.global_dim), (vocab, c.vocab)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// 1 when the model was trained with entity masks, 0 otherwise.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn maskcap_model_is_masked(model: *const MaskcapModel) -> i32 {
    model
        .as_ref()
        .map_or(0, |m| i32::from(m.ckpt.kind == ModelKind::Interpret))
}

/// Loads a dataset split file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskcap_dataset_load(path: *const c_char, out: *mut *mut MaskcapDataset) -> MaskcapStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let data = load_dataset(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MaskcapDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`maskcap_dataset_load`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn maskcap_dataset_free(dataset: *mut MaskcapDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples, 0 for NULL.
///
/// # Safety
/// `dataset` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn maskcap_dataset_len(dataset: *const MaskcapDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

/// Id of the sample at `index` (file order).
///
/// # Safety
/// `dataset` must be a live handle; `id` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskcap_dataset_sample_id(
    dataset: *const MaskcapDataset,
    index: usize,
    id: *mut u64,
) -> MaskcapStatus {
    guard(|| {
        let d = &ref_arg(dataset, "dataset")?.data;
        out_arg(id, "id")?;
        let s = d
            .samples
            .get(index)
            .ok_or_else(|| fail(MaskcapStatus::InvalidArgument, format!("index {index} out of range")))?;
        *id = s.id;
        Ok(())
    })
}

fn sample_scene(dataset: &MaskcapDataset, id: u64) -> Result<SceneInput, Failure> {
    let s = dataset
        .data
        .get(id)
        .ok_or_else(|| Failure::from(Error::Lookup(format!("sample {id} not found"))))?;
    Ok(SceneInput::from_sample(s)?)
}

unsafe fn raw_scene(
    entities: *const f64,
    slots: usize,
    entity_dim: usize,
    global: *const f64,
    global_dim: usize,
) -> Result<SceneInput, Failure> {
    let e = slice_arg(entities, slots * entity_dim, "entities")?;
    let g = slice_arg(global, global_dim, "global")?;
    Ok(SceneInput::new(
        Tensor::new(vec![slots, entity_dim], e.to_vec())?,
        Tensor::vector(g.to_vec())?,
    )?)
}

unsafe fn write_mask(model: &MaskcapModel, scene: &SceneInput, out: *mut f64, cap: usize, len: *mut usize) -> Result<(), Failure> {
    out_arg(len, "out_len")?;
    let mask = model.ckpt.model.predict_mask(scene)?;
    *len = mask.len();
    if cap < mask.len() {
        return Err(fail(
            MaskcapStatus::BufferTooSmall,
            format!("mask needs {} values, buffer holds {cap}", mask.len()),
        ));
    }
    out_arg(out, "out")?;
    std::slice::from_raw_parts_mut(out, mask.len()).copy_from_slice(&mask);
    Ok(())
}

/// Predicted per-slot mask of a dataset sample. Writes `*out_len` values
/// into `out`; on [`MaskcapStatus::BufferTooSmall`] only `*out_len` is set.
///
/// # Safety
/// Handles must be live; `out` must hold `cap` values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskcap_predict_mask(
    model: *const MaskcapModel,
    dataset: *const MaskcapDataset,
    sample_id: u64,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> MaskcapStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let scene = sample_scene(ref_arg(dataset, "dataset")?, sample_id)?;
        write_mask(m, &scene, out, cap, out_len)
    })
}

/// Like [`maskcap_predict_mask`] for raw features: `entities` is row-major
/// `slots × entity_dim`, `global` has `global_dim` values.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn maskcap_predict_mask_features(
    model: *const MaskcapModel,
    entities: *const f64,
    slots: usize,
    entity_dim: usize,
    global: *const f64,
    global_dim: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> MaskcapStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let scene = raw_scene(entities, slots, entity_dim, global, global_dim)?;
        write_mask(m, &scene, out, cap, out_len)
    })
}

/// Options for caption generation. `mask` may be NULL with `mask_len` 0, in
/// which case a masked model uses its predicted mask.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MaskcapCaptionOptions {
    pub beam: usize,
    pub max_len: usize,
    pub mask: *const f64,
    pub mask_len: usize,
}

/// Beam 5, at most 20 tokens, no mask override.
#[no_mangle]
pub extern "C" fn maskcap_caption_options_default() -> MaskcapCaptionOptions {
    let d = DecodeOptions::default();
    MaskcapCaptionOptions {
        beam: d.beam,
        max_len: d.max_len,
        mask: ptr::null(),
        mask_len: 0,
    }
}

unsafe fn write_caption(
    model: &MaskcapModel,
    scene: &SceneInput,
    opts: &MaskcapCaptionOptions,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
    logp: *mut f64,
) -> Result<(), Failure> {
    let mask = if opts.mask_len == 0 {
        None
    } else {
        Some(slice_arg(opts.mask, opts.mask_len, "mask")?)
    };
    let kind = if mask.is_some() { ModelKind::Interpret } else { model.ckpt.kind };
    let decode = DecodeOptions {
        beam: opts.beam,
        max_len: opts.max_len,
    };
    let g = generate(&model.ckpt.model, scene, kind, mask, &decode)?;
    let text = model.ckpt.vocab.decode(&g.tokens).join(" ");
    let bytes = text.len() + 1;
    if !needed.is_null() {
        *needed = bytes;
    }
    if !logp.is_null() {
        *logp = g.logp;
    }
    if cap < bytes {
        return Err(fail(
            MaskcapStatus::BufferTooSmall,
            format!("caption needs {bytes} bytes, buffer holds {cap}"),
        ));
    }
    out_arg(buf, "buf")?;
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

/// Captions a dataset sample into `buf` as space-separated tokens with a
/// trailing NUL. `*needed` (if non-NULL) receives the byte count including
/// the NUL, also when the buffer is too small.
///
/// # Safety
/// Handles must be live; `opts` must be valid; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn maskcap_caption(
    model: *const MaskcapModel,
    dataset: *const MaskcapDataset,
    sample_id: u64,
    opts: *const MaskcapCaptionOptions,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
    logp: *mut f64,
) -> MaskcapStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let o = ref_arg(opts, "opts")?;
        let scene = sample_scene(ref_arg(dataset, "dataset")?, sample_id)?;
        write_caption(m, &scene, o, buf, cap, needed, logp)
    })
}

/// [`maskcap_caption`] for raw features laid out as in
/// [`maskcap_predict_mask_features`].
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn maskcap_caption_features(
    model: *const MaskcapModel,
    entities: *const f64,
    slots: usize,
    entity_dim: usize,
    global: *const f64,
    global_dim: usize,
    opts: *const MaskcapCaptionOptions,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
    logp: *mut f64,
) -> MaskcapStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let o = ref_arg(opts, "opts")?;
        let scene = raw_scene(entities, slots, entity_dim, global, global_dim)?;
        write_caption(m, &scene, o, buf, cap, needed, logp)
    })
}
