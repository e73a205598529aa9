//! C ABI over the mlerl training core.
//!
//! Every fallible call returns an [`MlerlStatus`]; on failure the message is
//! kept per thread and can be fetched with [`mlerl_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Strings returned to the caller are released with [`mlerl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlerl::executor::frequency_law;
use mlerl::instrument::{reward::invalid_reward, MarkerProtocol, MarkerStage};
use mlerl::learner::{apply_update, duration_weights};
use mlerl::orchestrator::checkpoint::{decode_policy, encode_policy};
use mlerl::policy::{LibraryPolicy, StateKey};
use mlerl::{sign_adjust, Error, MetricDirection, Mode};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlerlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    UnknownState = 4,
    Io = 5,
    Format = 6,
    Update = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlerlMode {
    Scratch = 0,
    Improve = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlerlMarkerMode {
    Plain = 0,
    Nonce = 1,
}

/// Number of progress-marker stages; bit `i` of a marker mask is stage `i`.
pub const MLERL_MARKER_STAGES: u32 = 7;

/// Opaque factored softmax policy.
pub struct MlerlPolicy {
    inner: LibraryPolicy,
}

/// Opaque seeded ChaCha8 generator.
pub struct MlerlRng {
    inner: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MlerlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::State(_) => MlerlStatus::UnknownState,
            Error::Index { .. } | Error::Shape(_) | Error::Config(_) | Error::Reward(_) => {
                MlerlStatus::InvalidArgument
            }
            Error::Update(_) => MlerlStatus::Update,
            Error::Io(_) | Error::Path { .. } => MlerlStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) => MlerlStatus::Format,
            _ => MlerlStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: MlerlStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MlerlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MlerlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside mlerl");
            MlerlStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(MlerlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn nonnull_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(MlerlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MlerlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(MlerlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(MlerlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MlerlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn to_c(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .unwrap_or_default()
        .into_raw()
}

fn protocol(mode: MlerlMarkerMode, nonce: u64) -> MarkerProtocol {
    match mode {
        MlerlMarkerMode::Plain => MarkerProtocol::plain(),
        MlerlMarkerMode::Nonce => MarkerProtocol::nonce(nonce),
    }
}

fn state_key(policy: &LibraryPolicy, state: usize) -> Result<StateKey, Failure> {
    policy.state_keys().nth(state).cloned().ok_or_else(|| {
        fail(
            MlerlStatus::UnknownState,
            format!(
                "state {state} out of range for {} states",
                policy.num_states()
            ),
        )
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mlerl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Release with
/// [`mlerl_string_free`].
#[no_mangle]
pub extern "C" fn mlerl_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mlerl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn mlerl_rng_new(seed: u64) -> *mut MlerlRng {
    Box::into_raw(Box::new(MlerlRng {
        inner: ChaCha8Rng::seed_from_u64(seed),
    }))
}

/// # Safety
/// `rng` must be null or a handle from [`mlerl_rng_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn mlerl_rng_free(rng: *mut MlerlRng) {
    if !rng.is_null() {
        drop(Box::from_raw(rng));
    }
}

/// # Safety
/// `rng` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mlerl_rng_next_u64(rng: *mut MlerlRng, out: *mut u64) -> MlerlStatus {
    guard(|| {
        let rng = nonnull_mut(rng, "rng")?;
        *nonnull_mut(out, "out")? = rng.inner.next_u64();
        Ok(())
    })
}

/// Single-state, single-slot policy over `n` placeholder actions.
///
/// # Safety
/// `logits` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_from_logits(
    logits: *const f64,
    n: usize,
    out: *mut *mut MlerlPolicy,
) -> MlerlStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        let logits = slice(logits, n, "logits")?;
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(fail(
                MlerlStatus::InvalidArgument,
                "logits must be non-empty and finite",
            ));
        }
        *out = Box::into_raw(Box::new(MlerlPolicy {
            inner: LibraryPolicy::with_logits(logits),
        }));
        Ok(())
    })
}

/// Loads a policy file, or `policy.bin` inside a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_load(
    path: *const c_char,
    out: *mut *mut MlerlPolicy,
) -> MlerlStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        let path = Path::new(string(path, "path")?);
        let file = if path.is_dir() {
            path.join("policy.bin")
        } else {
            path.to_path_buf()
        };
        let bytes = std::fs::read(&file)
            .map_err(|e| fail(MlerlStatus::Io, format!("{}: {e}", file.display())))?;
        *out = Box::into_raw(Box::new(MlerlPolicy {
            inner: decode_policy(&bytes)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be valid; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_save(
    policy: *const MlerlPolicy,
    path: *const c_char,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull(policy, "policy")?;
        let path = string(path, "path")?;
        let bytes = encode_policy(&policy.inner)?;
        std::fs::write(path, bytes).map_err(|e| fail(MlerlStatus::Io, format!("{path}: {e}")))
    })
}

/// # Safety
/// `policy` must be null or a policy handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_free(policy: *mut MlerlPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// # Safety
/// `policy` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_num_states(policy: *const MlerlPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.inner.num_states())
}

/// # Safety
/// `policy` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_num_params(policy: *const MlerlPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.inner.params().len())
}

/// # Safety
/// `policy` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_version(policy: *const MlerlPolicy) -> u64 {
    policy.as_ref().map_or(0, |p| p.inner.version())
}

/// Copies the parameter vector into `out` (capacity `cap`).
///
/// # Safety
/// `policy` must be valid; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_params(
    policy: *const MlerlPolicy,
    out: *mut f64,
    cap: usize,
) -> MlerlStatus {
    guard(|| {
        let params = nonnull(policy, "policy")?.inner.params();
        if cap < params.len() {
            return Err(fail(
                MlerlStatus::BufferTooSmall,
                format!("need {} doubles", params.len()),
            ));
        }
        slice_mut(out, params.len(), "out")?.copy_from_slice(params);
        Ok(())
    })
}

/// Index of the `(task_id, mode)` state.
///
/// # Safety
/// `policy` and `out` must be valid; `task_id` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_state_index(
    policy: *const MlerlPolicy,
    task_id: *const c_char,
    mode: MlerlMode,
    out: *mut usize,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull(policy, "policy")?;
        let out = nonnull_mut(out, "out")?;
        let mode = match mode {
            MlerlMode::Scratch => Mode::Scratch,
            MlerlMode::Improve => Mode::Improve,
        };
        *out = policy
            .inner
            .state_index(&StateKey::new(string(task_id, "task_id")?, mode))?;
        Ok(())
    })
}

/// Number of slots (independent choices) of a state.
///
/// # Safety
/// `policy` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_num_slots(
    policy: *const MlerlPolicy,
    state: usize,
    out: *mut usize,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull(policy, "policy")?;
        state_key(&policy.inner, state)?;
        *nonnull_mut(out, "out")? = policy.inner.slot_sizes(state).len();
        Ok(())
    })
}

/// Draws one action for `state` at `temperature`. Writes the slot choices
/// to `action` (capacity `cap`), their count to `out_len` and the summed
/// log-probability to `out_logprob`.
///
/// # Safety
/// All pointers must be valid; `action` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_sample(
    policy: *const MlerlPolicy,
    state: usize,
    temperature: f64,
    rng: *mut MlerlRng,
    action: *mut usize,
    cap: usize,
    out_len: *mut usize,
    out_logprob: *mut f64,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull(policy, "policy")?;
        let rng = nonnull_mut(rng, "rng")?;
        let out_len = nonnull_mut(out_len, "out_len")?;
        let out_logprob = nonnull_mut(out_logprob, "out_logprob")?;
        let key = state_key(&policy.inner, state)?;
        let slots = policy.inner.slot_sizes(state).len();
        if cap < slots {
            return Err(fail(
                MlerlStatus::BufferTooSmall,
                format!("need {slots} slots"),
            ));
        }
        let sample = policy.inner.sample(&key, temperature, &mut rng.inner)?;
        slice_mut(action, slots, "action")?.copy_from_slice(&sample.action);
        *out_len = slots;
        *out_logprob = sample.logprob();
        Ok(())
    })
}

/// Log-probability of `action` in `state` at `temperature`.
///
/// # Safety
/// `policy` and `out` must be valid; `action` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_log_prob(
    policy: *const MlerlPolicy,
    state: usize,
    action: *const usize,
    n: usize,
    temperature: f64,
    out: *mut f64,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull(policy, "policy")?;
        let out = nonnull_mut(out, "out")?;
        state_key(&policy.inner, state)?;
        if !(temperature > 0.0) {
            return Err(fail(
                MlerlStatus::InvalidArgument,
                "temperature must be > 0",
            ));
        }
        *out = policy
            .inner
            .log_prob_at(state, slice(action, n, "action")?, temperature)?;
        Ok(())
    })
}

/// Adds `scale * d log pi(action | state) / d theta` into `grad`, a vector of
/// `mlerl_policy_num_params` doubles.
///
/// # Safety
/// `policy` must be valid; `action` must hold `n` elements and `grad` `cap`.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_accumulate_grad(
    policy: *const MlerlPolicy,
    state: usize,
    action: *const usize,
    n: usize,
    scale: f64,
    grad: *mut f64,
    cap: usize,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull(policy, "policy")?;
        state_key(&policy.inner, state)?;
        let len = policy.inner.params().len();
        if cap != len {
            return Err(fail(
                MlerlStatus::BufferTooSmall,
                format!("gradient needs {len} doubles"),
            ));
        }
        let grad = slice_mut(grad, len, "grad")?;
        policy
            .inner
            .accumulate_grad_log_prob(state, slice(action, n, "action")?, scale, grad)?;
        Ok(())
    })
}

/// Global-norm clip at `grad_clip` (disabled when `<= 0`), then
/// `theta -= lr * g`. Writes the pre-clip norm to `out_norm` when non-null.
///
/// # Safety
/// `policy` must be valid; `grad` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_apply_update(
    policy: *mut MlerlPolicy,
    grad: *const f64,
    n: usize,
    lr: f64,
    grad_clip: f64,
    out_norm: *mut f64,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull_mut(policy, "policy")?;
        let report = apply_update(&mut policy.inner, slice(grad, n, "grad")?, lr, grad_clip)?;
        if let Some(o) = out_norm.as_mut() {
            *o = report.grad_norm;
        }
        Ok(())
    })
}

/// Renders an action as the program it stands for. Release `out_code` with
/// [`mlerl_string_free`].
///
/// # Safety
/// `policy` and `out_code` must be valid; `action` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn mlerl_policy_render_code(
    policy: *const MlerlPolicy,
    state: usize,
    action: *const usize,
    n: usize,
    out_code: *mut *mut c_char,
) -> MlerlStatus {
    guard(|| {
        let policy = nonnull(policy, "policy")?;
        let out_code = nonnull_mut(out_code, "out_code")?;
        state_key(&policy.inner, state)?;
        let action = slice(action, n, "action")?;
        policy.inner.log_prob_at(state, action, 1.0)?;
        let (_, _, code) = policy.inner.library(state).render(action)?;
        *out_code = to_c(&code);
        Ok(())
    })
}

/// Per-sample duration weights `max(dt, floor) / mean(max(dt, floor))`,
/// clamped to `[clamp_lo, clamp_hi]` unless either bound is NaN. All ones
/// when `enabled` is false.
///
/// # Safety
/// `durations` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlerl_duration_weights(
    durations: *const f64,
    n: usize,
    enabled: bool,
    floor: f64,
    clamp_lo: f64,
    clamp_hi: f64,
    out: *mut f64,
) -> MlerlStatus {
    guard(|| {
        let durations = slice(durations, n, "durations")?;
        let out = slice_mut(out, n, "out")?;
        let clamp = if clamp_lo.is_nan() || clamp_hi.is_nan() {
            None
        } else if clamp_lo > clamp_hi {
            return Err(fail(MlerlStatus::InvalidArgument, "clamp_lo > clamp_hi"));
        } else {
            Some((clamp_lo, clamp_hi))
        };
        out.copy_from_slice(&duration_weights(durations, enabled, floor, clamp));
        Ok(())
    })
}

/// Expected completions per action inside a window of `window` seconds
/// shared by `workers` workers.
///
/// # Safety
/// `probs`, `durations` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mlerl_frequency_law(
    probs: *const f64,
    durations: *const f64,
    n: usize,
    window: f64,
    workers: usize,
    out: *mut f64,
) -> MlerlStatus {
    guard(|| {
        let durations = slice(durations, n, "durations")?;
        if durations.iter().any(|d| !(*d > 0.0)) {
            return Err(fail(MlerlStatus::InvalidArgument, "durations must be > 0"));
        }
        let law = frequency_law(slice(probs, n, "probs")?, durations, window, workers);
        slice_mut(out, n, "out")?.copy_from_slice(&law);
        Ok(())
    })
}

/// Reward of an invalid run that emitted `matched` distinct markers.
#[no_mangle]
pub extern "C" fn mlerl_invalid_reward(matched: u32) -> f64 {
    invalid_reward(matched.min(MLERL_MARKER_STAGES) as usize)
}

/// Maps a grader score to a reward; lower-is-better scores are negated.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlerl_sign_adjust(
    raw_score: f64,
    lower_is_better: bool,
    out: *mut f64,
) -> MlerlStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        let dir = if lower_is_better {
            MetricDirection::LowerBetter
        } else {
            MetricDirection::HigherBetter
        };
        *out = sign_adjust(raw_score, dir)?;
        Ok(())
    })
}

/// Parses progress markers from program stdout. Bit `i` of `out_mask` is set
/// when stage `i` was seen.
///
/// # Safety
/// `stdout_text` must be a NUL-terminated string; `out_mask` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlerl_parse_markers(
    stdout_text: *const c_char,
    mode: MlerlMarkerMode,
    nonce: u64,
    out_mask: *mut u32,
) -> MlerlStatus {
    guard(|| {
        let text = string(stdout_text, "stdout_text")?;
        let out = nonnull_mut(out_mask, "out_mask")?;
        let parsed = protocol(mode, nonce).parse_markers(text);
        *out = parsed.matched.iter().fold(0, |m, s| m | 1 << s.ordinal());
        Ok(())
    })
}

/// Neutralises marker emissions in program source. Release `out_code` with
/// [`mlerl_string_free`].
///
/// # Safety
/// `code` must be a NUL-terminated string; `out_code` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mlerl_sanitize(
    code: *const c_char,
    mode: MlerlMarkerMode,
    nonce: u64,
    out_code: *mut *mut c_char,
) -> MlerlStatus {
    guard(|| {
        let code = string(code, "code")?;
        let out = nonnull_mut(out_code, "out_code")?;
        *out = to_c(&protocol(mode, nonce).sanitize(code));
        Ok(())
    })
}

/// Stage name for bit `stage` of a marker mask, or null when out of range.
/// The string is static.
#[no_mangle]
pub extern "C" fn mlerl_marker_stage_name(stage: u32) -> *const c_char {
    const NAMES: [&str; 7] = [
        "imported_packages\0",
        "loaded_data\0",
        "defined_model\0",
        "training_loss\0",
        "trained_model\0",
        "testing_loss\0",
        "predicted_test_labels\0",
    ];
    debug_assert!(MarkerStage::ALL
        .iter()
        .zip(NAMES)
        .all(|(s, n)| n.trim_end_matches('\0') == s.name()));
    NAMES
        .get(stage as usize)
        .map_or(ptr::null(), |n| n.as_ptr().cast())
}
