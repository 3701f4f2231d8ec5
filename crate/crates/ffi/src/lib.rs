//! C ABI over the pathrank core.
//!
//! Worlds and models are opaque heap handles owned by the caller and released
//! with their `*_free` function. Every fallible call returns a [`PrStatus`];
//! on failure [`pr_last_error`] describes what went wrong on the calling
//! thread. Concept ids and lengths are `size_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pathrank::episode::{Episode, HistoryItem};
use pathrank::harness::ExperimentSpec;
use pathrank::model::{load_checkpoint, save_checkpoint, Model};
use pathrank::rng::{domain, stream_rng};
use pathrank::simulator::{Preset, Simulator, World};
use pathrank::training::train_model;
use pathrank::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad input: unknown concept, malformed config, invalid sizes.
    InvalidArgument = 2,
    /// File could not be read or written.
    Io = 3,
    /// The student already masters the targets; the effect is undefined.
    DegenerateEpisode = 4,
    /// Any other failure, including training divergence.
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque synthetic world.
pub struct PrWorld {
    inner: World,
}

/// Opaque trained recommender.
pub struct PrModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult = std::result::Result<(), Failure>;

/// Runs `f`, translating errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> FfiResult) -> PrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            PrStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            let status = match &e {
                Error::Io(_) => PrStatus::Io,
                Error::DegenerateEpisode { .. } => PrStatus::DegenerateEpisode,
                e if e.is_validation() => PrStatus::InvalidArgument,
                Error::Json(_) => PrStatus::InvalidArgument,
                _ => PrStatus::Runtime,
            };
            set_error(e.to_string());
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PrStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

/// Borrows `len` items; a null pointer is allowed only when `len` is zero.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        Ok(&[])
    } else if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(std::slice::from_raw_parts(p, len))
    }
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::Validation(format!("{what} is not valid UTF-8"))))
}

unsafe fn history(concepts: *const usize, mastery: *const f64, len: usize) -> Result<Vec<HistoryItem>, Failure> {
    let c = slice(concepts, len, "history_concepts")?;
    let m = slice(mastery, len, "history_mastery")?;
    Ok(c.iter().zip(m).map(|(&concept, &mastery)| HistoryItem { concept, mastery }).collect())
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a preset world ("prereq-chain", "random-sparse" or "two-cluster").
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pr_world_new(
    preset: *const c_char,
    num_concepts: usize,
    seed: u64,
    out: *mut *mut PrWorld,
) -> PrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let preset = Preset::parse(string(preset, "preset")?)?;
        let world = World::preset(preset, num_concepts, seed)?;
        *out = Box::into_raw(Box::new(PrWorld { inner: world }));
        Ok(())
    })
}

/// Releases a world. Null is ignored.
///
/// # Safety
/// `world` must come from [`pr_world_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pr_world_free(world: *mut PrWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Number of concepts, or 0 for a null world.
///
/// # Safety
/// `world` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_world_num_concepts(world: *const PrWorld) -> usize {
    world.as_ref().map_or(0, |w| w.inner.num_concepts())
}

/// Simulates a student with the given history studying `path`, and writes
/// the normalized learning effect on `targets` to `out_effect`. When
/// `out_feedback` is non-null it receives `path_len` observed masteries.
/// `seed` drives the simulator noise, if any.
///
/// # Safety
/// Array pointers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn pr_world_run_path(
    world: *const PrWorld,
    history_concepts: *const usize,
    history_mastery: *const f64,
    history_len: usize,
    path: *const usize,
    path_len: usize,
    targets: *const usize,
    targets_len: usize,
    seed: u64,
    out_effect: *mut f64,
    out_feedback: *mut f64,
) -> PrStatus {
    guard(|| {
        let world = &non_null(world, "world")?.inner;
        if out_effect.is_null() {
            return Err(Failure::Null("out_effect"));
        }
        let history = history(history_concepts, history_mastery, history_len)?;
        let path = slice(path, path_len, "path")?;
        let targets = slice(targets, targets_len, "targets")?;
        let outcome = world.run_path(&history, path, targets, &mut stream_rng(seed, domain::SIM, 0))?;
        *out_effect = outcome.effect;
        if !out_feedback.is_null() {
            std::slice::from_raw_parts_mut(out_feedback, path_len).copy_from_slice(&outcome.feedback);
        }
        Ok(())
    })
}

/// Trains a recommender on `world`. `config_toml` holds optional [model] and
/// [train] sections; unknown keys are rejected. Any [world] section is
/// ignored in favor of the handle.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pr_model_train(
    world: *const PrWorld,
    config_toml: *const c_char,
    out: *mut *mut PrModel,
) -> PrStatus {
    guard(|| {
        let world = &non_null(world, "world")?.inner;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let mut spec = ExperimentSpec::from_toml_str(string(config_toml, "config_toml")?)?;
        spec.model.num_concepts = world.num_concepts();
        let init = Model::new(spec.model.clone(), &mut stream_rng(spec.train.seed, domain::INIT, 0))?;
        let outcome = train_model(world, init, &spec.train, |_| {})?;
        *out = Box::into_raw(Box::new(PrModel { inner: outcome.model }));
        Ok(())
    })
}

/// Loads a JSON checkpoint written by [`pr_model_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pr_model_load(path: *const c_char, out: *mut *mut PrModel) -> PrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (config, params) = load_checkpoint(Path::new(string(path, "path")?))?;
        *out = Box::into_raw(Box::new(PrModel {
            inner: Model { config, params },
        }));
        Ok(())
    })
}

/// Writes the model as a JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pr_model_save(model: *const PrModel, path: *const c_char) -> PrStatus {
    guard(|| {
        let model = &non_null(model, "model")?.inner;
        save_checkpoint(Path::new(string(path, "path")?), &model.config, &model.params)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pr_model_free(model: *mut PrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of concepts the model covers, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_model_num_concepts(model: *const PrModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.num_concepts)
}

/// Greedy path of `path_len` distinct concepts drawn from `candidates`,
/// written to `out_path` in study order.
///
/// # Safety
/// Array pointers must hold the stated number of elements; `out_path` must
/// have room for `path_len`.
#[no_mangle]
pub unsafe extern "C" fn pr_model_recommend(
    model: *const PrModel,
    history_concepts: *const usize,
    history_mastery: *const f64,
    history_len: usize,
    candidates: *const usize,
    candidates_len: usize,
    targets: *const usize,
    targets_len: usize,
    path_len: usize,
    out_path: *mut usize,
) -> PrStatus {
    guard(|| {
        let model = &non_null(model, "model")?.inner;
        if out_path.is_null() && path_len > 0 {
            return Err(Failure::Null("out_path"));
        }
        let episode = Episode {
            history: history(history_concepts, history_mastery, history_len)?,
            candidates: slice(candidates, candidates_len, "candidates")?.to_vec(),
            targets: slice(targets, targets_len, "targets")?.to_vec(),
            path_len,
        };
        episode.validate(model.config.num_concepts)?;
        let sample = model.greedy(&episode)?;
        if path_len > 0 {
            std::slice::from_raw_parts_mut(out_path, path_len).copy_from_slice(&sample.concepts);
        }
        Ok(())
    })
}
