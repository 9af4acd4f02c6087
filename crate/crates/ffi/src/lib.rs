//! C ABI for embedding the trained artifacts in other languages: opaque
//! handles, integer status codes, and a thread-local last-error message.
//! The generated header lands in `include/routesae.h`.
//!
//! Conventions:
//! - Every fallible call returns `RsaeStatus`; non-`Ok` codes leave a
//!   human-readable message retrievable via `rsae_last_error`.
//! - Handles are created and released by this library only
//!   (`rsae_*_free` on null is a no-op).
//! - Activation buffers are row-major f32 in the model's raw (unnormalized)
//!   space; encode/decode handle normalization internally.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::PathBuf;
use std::ptr;

use routesae::error::Error;
use routesae::store::{ActivationRecord, NormalizationStats};
use routesae::toylm::{lm_forward, ToyLmConfig, ToyLmParams};
use routesae::trainer::{Architecture, Artifact};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IoError = 3,
    FormatError = 4,
    ShapeError = 5,
    Unsupported = 6,
    BufferTooSmall = 7,
}

/// Architecture tags mirrored as integers.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsaeArchitecture {
    Relu = 0,
    TopK = 1,
    RouteHard = 2,
    RouteSoft = 3,
    RouteRandom = 4,
    Crosscoder = 5,
}

/// Shape summary of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RsaeModelInfo {
    pub architecture: RsaeArchitecture,
    /// Activation width.
    pub d: u32,
    /// Latent width M.
    pub latent_width: u32,
    /// Sparsity k.
    pub k: u32,
    /// Number of routed layers L.
    pub num_layers: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> RsaeStatus {
    match err {
        Error::Io { .. } => RsaeStatus::IoError,
        Error::Format(_) | Error::Corrupt { .. } | Error::Parse { .. } => RsaeStatus::FormatError,
        Error::Shape(_) => RsaeStatus::ShapeError,
        Error::Config(_) | Error::Data(_) => RsaeStatus::InvalidArgument,
        Error::Endpoint(_) => RsaeStatus::Unsupported,
    }
}

fn fail(err: Error) -> RsaeStatus {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

/// Loaded artifact plus the normalization it was trained under.
pub struct RsaeModel {
    artifact: Artifact,
    stats: NormalizationStats,
}

/// Frozen toy language model.
pub struct RsaeToyLm {
    params: ToyLmParams,
}

/// Static library version string (NUL-terminated).
#[no_mangle]
pub extern "C" fn rsae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message into `buf` (truncated to `len - 1` bytes,
/// always NUL-terminated). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn rsae_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

unsafe fn cstr_to_path(ptr: *const c_char) -> Result<PathBuf, RsaeStatus> {
    if ptr.is_null() {
        set_error("null path pointer");
        return Err(RsaeStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(RsaeStatus::FormatError)
        }
    }
}

/// Load a training checkpoint plus its normalization statistics file.
/// `stats_path` may be null, in which case unit scales are assumed.
///
/// # Safety
/// `checkpoint_path` and (when non-null) `stats_path` must be NUL-terminated
/// strings; `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn rsae_model_load(
    checkpoint_path: *const c_char,
    stats_path: *const c_char,
    out: *mut *mut RsaeModel,
) -> RsaeStatus {
    if out.is_null() {
        set_error("null output handle");
        return RsaeStatus::NullPointer;
    }
    let ckpt = match cstr_to_path(checkpoint_path) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let artifact = match Artifact::load(&ckpt) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let stats = if stats_path.is_null() {
        NormalizationStats::identity(artifact.layer_ids.clone(), artifact.model.d() as u32)
    } else {
        let path = match cstr_to_path(stats_path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match NormalizationStats::load(&path) {
            Ok(s) => s,
            Err(e) => return fail(e),
        }
    };
    if stats.per_layer_scale.len() != artifact.layer_ids.len() {
        set_error(format!(
            "stats cover {} layers, model routes {}",
            stats.per_layer_scale.len(),
            artifact.layer_ids.len()
        ));
        return RsaeStatus::ShapeError;
    }
    *out = Box::into_raw(Box::new(RsaeModel { artifact, stats }));
    RsaeStatus::Ok
}

/// # Safety
/// `model` must have come from `rsae_model_load` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn rsae_model_free(model: *mut RsaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsae_model_info(
    model: *const RsaeModel,
    info: *mut RsaeModelInfo,
) -> RsaeStatus {
    if model.is_null() || info.is_null() {
        set_error("null pointer");
        return RsaeStatus::NullPointer;
    }
    let m = &(*model).artifact;
    *info = RsaeModelInfo {
        architecture: match m.architecture {
            Architecture::Relu => RsaeArchitecture::Relu,
            Architecture::TopK => RsaeArchitecture::TopK,
            Architecture::RouteHard => RsaeArchitecture::RouteHard,
            Architecture::RouteSoft => RsaeArchitecture::RouteSoft,
            Architecture::RouteRandom => RsaeArchitecture::RouteRandom,
            Architecture::Crosscoder => RsaeArchitecture::Crosscoder,
        },
        d: m.model.d() as u32,
        latent_width: m.model.latent_width() as u32,
        k: m.k as u32,
        num_layers: m.layer_ids.len() as u32,
    };
    RsaeStatus::Ok
}

/// Encode one multi-layer activation record (`num_layers * d` raw floats,
/// layer-major). Writes up to `capacity` active (index, value) pairs sorted
/// by index, the active count, and the selected routed layer (the absolute
/// layer id, or `u32::MAX` for the crosscoder).
///
/// # Safety
/// All pointers must be valid for their documented lengths; `activations`
/// must hold exactly `num_layers * d` floats.
#[no_mangle]
pub unsafe extern "C" fn rsae_encode(
    model: *const RsaeModel,
    activations: *const f32,
    activations_len: usize,
    sample_tag: u64,
    out_indices: *mut u32,
    out_values: *mut f32,
    capacity: usize,
    out_count: *mut usize,
    out_selected_layer: *mut u32,
) -> RsaeStatus {
    if model.is_null() || activations.is_null() || out_count.is_null() {
        set_error("null pointer");
        return RsaeStatus::NullPointer;
    }
    let handle = &*model;
    let d = handle.artifact.model.d();
    let l = handle.artifact.layer_ids.len();
    if activations_len != l * d {
        set_error(format!(
            "activation buffer holds {activations_len} floats, expected L*d = {}",
            l * d
        ));
        return RsaeStatus::ShapeError;
    }
    let data = std::slice::from_raw_parts(activations, activations_len).to_vec();
    let mut record = ActivationRecord::new(0, 0, None, data);
    if let Err(e) = routesae::store::apply_normalization(&mut record, &handle.stats) {
        return fail(e);
    }
    let (code, slot) = match handle.artifact.encode_record(&record, sample_tag) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    *out_count = code.l0();
    if code.l0() > capacity {
        set_error(format!(
            "code has {} active latents, buffer capacity is {capacity}",
            code.l0()
        ));
        return RsaeStatus::BufferTooSmall;
    }
    if !out_indices.is_null() && !out_values.is_null() {
        for (i, (&idx, &val)) in code.indices.iter().zip(&code.values).enumerate() {
            *out_indices.add(i) = idx as u32;
            *out_values.add(i) = val;
        }
    }
    if !out_selected_layer.is_null() {
        *out_selected_layer = slot
            .map(|s| handle.artifact.layer_ids[s])
            .unwrap_or(u32::MAX);
    }
    RsaeStatus::Ok
}

/// Decode an active (index, value) set back to a d-width reconstruction in
/// the normalized space. Crosscoder models are not supported here (they
/// produce one reconstruction per layer).
///
/// # Safety
/// `indices`/`values` must hold `count` entries; `out` must hold d floats.
#[no_mangle]
pub unsafe extern "C" fn rsae_decode(
    model: *const RsaeModel,
    indices: *const u32,
    values: *const f32,
    count: usize,
    out: *mut f32,
    out_len: usize,
) -> RsaeStatus {
    if model.is_null() || out.is_null() || (count > 0 && (indices.is_null() || values.is_null())) {
        set_error("null pointer");
        return RsaeStatus::NullPointer;
    }
    let handle = &*model;
    let d = handle.artifact.model.d();
    if out_len != d {
        set_error(format!("output buffer holds {out_len} floats, expected d = {d}"));
        return RsaeStatus::ShapeError;
    }
    let sae = match &handle.artifact.model {
        routesae::trainer::ModelParams::Single(s) => s,
        routesae::trainer::ModelParams::Routed { sae, .. } => sae,
        routesae::trainer::ModelParams::Cross(_) => {
            set_error("crosscoder models decode one reconstruction per layer; unsupported here");
            return RsaeStatus::Unsupported;
        }
    };
    let mut pairs: Vec<(usize, f32)> = (0..count)
        .map(|i| (*indices.add(i) as usize, *values.add(i)))
        .collect();
    pairs.sort_by_key(|(i, _)| *i);
    let code = routesae::sae::SparseCode {
        indices: pairs.iter().map(|(i, _)| *i).collect(),
        values: pairs.iter().map(|(_, v)| *v).collect(),
        latent_width: sae.latent_width(),
    };
    match routesae::sae::decode(sae, &code) {
        Ok(x_hat) => {
            for (i, v) in x_hat.iter().enumerate() {
                *out.add(i) = *v;
            }
            RsaeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Initialize a frozen toy language model from its architecture parameters.
///
/// # Safety
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn rsae_toylm_init(
    d_model: u32,
    n_layers: u32,
    n_heads: u32,
    max_seq: u32,
    seed: u64,
    out: *mut *mut RsaeToyLm,
) -> RsaeStatus {
    if out.is_null() {
        set_error("null output handle");
        return RsaeStatus::NullPointer;
    }
    let config = ToyLmConfig {
        vocab: 256,
        d_model: d_model as usize,
        n_layers: n_layers as usize,
        n_heads: n_heads as usize,
        mlp_ratio: 4,
        max_seq: max_seq as usize,
        seed,
    };
    match ToyLmParams::init(config) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(RsaeToyLm { params }));
            RsaeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load toy-model weights from a weight envelope file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsae_toylm_load(
    path: *const c_char,
    out: *mut *mut RsaeToyLm,
) -> RsaeStatus {
    if out.is_null() {
        set_error("null output handle");
        return RsaeStatus::NullPointer;
    }
    let path = match cstr_to_path(path) {
        Ok(p) => p,
        Err(code) => return code,
    };
    match ToyLmParams::load(&path) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(RsaeToyLm { params }));
            RsaeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `lm` must have come from a toy-model constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rsae_toylm_free(lm: *mut RsaeToyLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Next-token logits for a token sequence: writes `len * 256` floats.
///
/// # Safety
/// `tokens` must hold `len` token ids; `out_logits` must hold `out_len`
/// floats with `out_len == len * 256`.
#[no_mangle]
pub unsafe extern "C" fn rsae_toylm_logits(
    lm: *const RsaeToyLm,
    tokens: *const u32,
    len: usize,
    out_logits: *mut f32,
    out_len: usize,
) -> RsaeStatus {
    if lm.is_null() || tokens.is_null() || out_logits.is_null() {
        set_error("null pointer");
        return RsaeStatus::NullPointer;
    }
    let handle = &*lm;
    let vocab = handle.params.config.vocab;
    if out_len != len * vocab {
        set_error(format!(
            "logit buffer holds {out_len} floats, expected len * vocab = {}",
            len * vocab
        ));
        return RsaeStatus::ShapeError;
    }
    let seq = std::slice::from_raw_parts(tokens, len);
    match lm_forward(&handle.params, seq) {
        Ok(out) => {
            for (i, v) in out.logits.iter().enumerate() {
                *out_logits.add(i) = *v;
            }
            RsaeStatus::Ok
        }
        Err(e) => fail(e),
    }
}
