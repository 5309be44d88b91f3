//! C ABI over the `deltamem` crate.
//!
//! Models and states are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`DmStatus`]; on failure the
//! message is kept per thread and read back with [`dm_last_error_message`].
//! Panics never cross the boundary; they surface as `DM_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deltamem::checkpoint::{load_model, load_state, save_state};
use deltamem::eval::{constrained_argmax, generate};
use deltamem::model::DeltaMem;
use deltamem::numerics::Tensor;
use deltamem::osam::{delta_write, MemoryState};
use deltamem::steering::BranchSet;
use deltamem::training::count_trainable_params;
use deltamem::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    OutOfVocab = 7,
    TooLong = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// A trained model (frozen backbone plus memory).
pub struct DmModel(DeltaMem<f32>);

/// A memory state for one model.
pub struct DmState(MemoryState<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DmStatus {
    match e {
        Error::Io(_) => DmStatus::Io,
        Error::Format(_) | Error::MissingTensor(_) | Error::Json(_) => DmStatus::Format,
        Error::Shape { .. } | Error::StateCount { .. } | Error::Index { .. } => DmStatus::Shape,
        Error::NonFinite(_) => DmStatus::NonFinite,
        Error::OutOfVocab { .. } => DmStatus::OutOfVocab,
        Error::TooLong { .. } => DmStatus::TooLong,
        _ => DmStatus::InvalidArgument,
    }
}

fn fail(status: DmStatus, msg: &str) -> DmStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), DmStatus>) -> DmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DmStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(DmStatus::Internal, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, DmStatus>;
}

impl<T> OrStatus<T> for deltamem::Result<T> {
    fn or_status(self) -> Result<T, DmStatus> {
        self.map_err(|e| fail(status_of(&e), &e.to_string()))
    }
}

fn null(what: &str) -> DmStatus {
    fail(DmStatus::NullPointer, &format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, DmStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(DmStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], DmStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, DmStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, DmStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dm_model_load(path: *const c_char, out: *mut *mut DmModel) -> DmStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = load_model::<f32>(&path_arg(path)?).or_status()?;
        *out = Box::into_raw(Box::new(DmModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dm_model_free(model: *mut DmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, i.e. the length of a logits row.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dm_model_vocab_size(model: *const DmModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.backbone.config.vocab_size)
}

/// Trainable parameter count of a loaded model.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dm_model_params_count(model: *const DmModel, out: *mut usize) -> DmStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let n = count_trainable_params(m.backbone.config.d_model, m.hooked_layers().len(), &m.memory).or_status()?;
        *mut_arg(out, "out")? = n;
        Ok(())
    })
}

/// Closed-form trainable parameter count for `n_hooked_layers` layers of
/// width `d_model`, rank `rank`, `n_states` sub-states and steering branches
/// given as a string such as `"qo"`.
///
/// # Safety
/// `branches` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dm_params_count(
    d_model: usize,
    n_hooked_layers: usize,
    rank: usize,
    n_states: usize,
    branches: *const c_char,
    out: *mut usize,
) -> DmStatus {
    guard(|| {
        if branches.is_null() {
            return Err(null("branches"));
        }
        let b: BranchSet = CStr::from_ptr(branches)
            .to_str()
            .map_err(|_| fail(DmStatus::InvalidArgument, "branches is not valid UTF-8"))?
            .parse()
            .or_status()?;
        let strategy = if n_states > 1 { "msw" } else { "tsw" };
        let mem = deltamem::model::MemoryConfig {
            rank,
            branches: b,
            strategy: strategy.parse().or_status()?,
            n_states,
            ..Default::default()
        };
        let n = count_trainable_params(d_model, n_hooked_layers, &mem).or_status()?;
        *mut_arg(out, "out")? = n;
        Ok(())
    })
}

/// Fresh all-zero state shaped for `model`.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dm_state_new(model: *const DmModel, out: *mut *mut DmState) -> DmStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let out = mut_arg(out, "out")?;
        *out = Box::into_raw(Box::new(DmState(m.zero_state())));
        Ok(())
    })
}

/// # Safety
/// `state` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dm_state_free(state: *mut DmState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// # Safety
/// `state` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dm_state_save(state: *const DmState, path: *const c_char) -> DmStatus {
    guard(|| save_state(&ref_arg(state, "state")?.0, &path_arg(path)?).or_status())
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dm_state_load(path: *const c_char, out: *mut *mut DmState) -> DmStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let s = load_state::<f32>(&path_arg(path)?).or_status()?;
        *out = Box::into_raw(Box::new(DmState(s)));
        Ok(())
    })
}

/// Writes `len` context tokens into `state`. `segments` may be null, in
/// which case every token is its own segment.
///
/// # Safety
/// Pointers must be valid for `len` elements; `model` and `state` live.
#[no_mangle]
pub unsafe extern "C" fn dm_ingest(
    model: *const DmModel,
    state: *mut DmState,
    tokens: *const u32,
    segments: *const u32,
    len: usize,
) -> DmStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let s = &mut mut_arg(state, "state")?.0;
        let t = slice_arg(tokens, len, "tokens")?;
        let seg = if segments.is_null() {
            None
        } else {
            Some(slice_arg(segments, len, "segments")?)
        };
        m.ingest(t, seg, s).or_status()
    })
}

/// Next-token logits after `prompt` given `state`, written to `logits`
/// (capacity `logits_len`, at least the vocabulary size). The state is not
/// modified.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dm_query(
    model: *const DmModel,
    state: *const DmState,
    prompt: *const u32,
    prompt_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> DmStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let s = &ref_arg(state, "state")?.0;
        let p = slice_arg(prompt, prompt_len, "prompt")?;
        let vocab = m.backbone.config.vocab_size;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if logits_len < vocab {
            return Err(fail(DmStatus::BufferTooSmall, &format!("logits needs {vocab} slots")));
        }
        if p.is_empty() {
            return Err(fail(DmStatus::InvalidArgument, "empty prompt"));
        }
        let all = m.logits(p, s).or_status()?;
        let row = &all.data()[(p.len() - 1) * vocab..p.len() * vocab];
        std::slice::from_raw_parts_mut(logits, vocab).copy_from_slice(row);
        Ok(())
    })
}

/// Greedy answer of `answer_len` tokens restricted to `alphabet`, ties to
/// the lowest id.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dm_generate(
    model: *const DmModel,
    state: *const DmState,
    prompt: *const u32,
    prompt_len: usize,
    alphabet: *const u32,
    alphabet_len: usize,
    answer: *mut u32,
    answer_len: usize,
) -> DmStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let s = &ref_arg(state, "state")?.0;
        let p = slice_arg(prompt, prompt_len, "prompt")?;
        let a = slice_arg(alphabet, alphabet_len, "alphabet")?;
        let vocab = m.backbone.config.vocab_size;
        if p.is_empty() || a.is_empty() || a.iter().any(|&t| t as usize >= vocab) {
            return Err(fail(DmStatus::InvalidArgument, "empty prompt or alphabet, or alphabet outside vocabulary"));
        }
        if answer_len > 0 && answer.is_null() {
            return Err(null("answer"));
        }
        let out = generate(m, p, s, answer_len, a).or_status()?;
        if answer_len > 0 {
            std::slice::from_raw_parts_mut(answer, answer_len).copy_from_slice(&out);
        }
        Ok(())
    })
}

/// Index of the largest of `row[allowed[i]]`, ties to the first.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dm_constrained_argmax(
    row: *const f32,
    row_len: usize,
    allowed: *const u32,
    allowed_len: usize,
    out: *mut u32,
) -> DmStatus {
    guard(|| {
        let r = slice_arg(row, row_len, "row")?;
        let a = slice_arg(allowed, allowed_len, "allowed")?;
        if a.is_empty() || a.iter().any(|&t| t as usize >= r.len()) {
            return Err(fail(DmStatus::InvalidArgument, "allowed ids must be non-empty and inside the row"));
        }
        *mut_arg(out, "out")? = constrained_argmax(r, a);
        Ok(())
    })
}

/// One gated delta write on a row-major `rank x rank` matrix in place:
/// `S <- Diag(1-beta) S + Diag(beta) (v - S k) k^T`.
///
/// # Safety
/// `s` must hold `rank * rank` floats and the vectors `rank` each.
#[no_mangle]
pub unsafe extern "C" fn dm_delta_write(s: *mut f32, key: *const f32, value: *const f32, beta: *const f32, rank: usize) -> DmStatus {
    guard(|| {
        if rank == 0 {
            return Err(fail(DmStatus::InvalidArgument, "rank must be positive"));
        }
        if s.is_null() {
            return Err(null("s"));
        }
        let k = slice_arg(key, rank, "key")?;
        let v = slice_arg(value, rank, "value")?;
        let b = slice_arg(beta, rank, "beta")?;
        let sm = std::slice::from_raw_parts_mut(s, rank * rank);
        let cur = Tensor::new(vec![rank, rank], sm.to_vec()).or_status()?;
        let next = delta_write(&cur, k, v, b).or_status()?;
        sm.copy_from_slice(next.data());
        Ok(())
    })
}
