//! C ABI over `abc-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`-style
//! constructors and released with the matching `*_free`. Every fallible call
//! returns an [`AbcStatus`]; the message for the last failure on the calling
//! thread is available from [`abc_last_error`]. Panics are caught and reported
//! as `ABC_STATUS_PANIC`.
//!
//! # Safety
//!
//! Every pointer argument must be null or valid for the access its name
//! implies: handles must come from this library and not be freed yet, and
//! `buf`/`len` pairs must describe writable memory of at least `len` bytes.
//! Null is rejected with `ABC_STATUS_NULL_POINTER`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use abc_core::arm::{ArmError, JointConfig, NUM_JOINTS};
use abc_core::dataset::{read_episode, write_episode, DatasetError, Episode, Representation};
use abc_core::expert::{gen_demo, ExpertConfig, ExpertError};
use abc_core::policy::{Policy, PolicyError};
use abc_core::render::{FRAME_BYTES, IMAGE_SIZE};
use abc_core::rollout::{judge_episode, rollout, FailureReason, PolicyController};
use abc_core::scene::{make_intermediate_scene, make_training_scene, SceneError, SceneSpec, Side};
use abc_core::sim::World;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbcSide {
    Left = 0,
    Right = 1,
}

/// Rollout verdict; `ABC_REASON_SUCCESS` when the episode succeeded.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbcReason {
    Success = 0,
    NoClose = 1,
    MultipleClose = 2,
    EarlyClose = 3,
    NotCentered = 4,
    LostTarget = 5,
    NumericFault = 6,
}

pub struct AbcScene(SceneSpec);

pub struct AbcPolicy(Policy);

pub struct AbcEpisode(Episode);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

type Failure = (AbcStatus, String);

fn fail<T>(status: AbcStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err((status, msg.into()))
}

fn arm_err(e: ArmError) -> Failure {
    (AbcStatus::InvalidArgument, e.to_string())
}

fn scene_err(e: SceneError) -> Failure {
    (AbcStatus::InvalidArgument, e.to_string())
}

fn policy_err(e: PolicyError) -> Failure {
    let status = match e {
        PolicyError::Io(_) => AbcStatus::Io,
        PolicyError::Config(_) | PolicyError::History { .. } | PolicyError::Empty => AbcStatus::Format,
        PolicyError::Training { .. } | PolicyError::Nn(_) => AbcStatus::Numeric,
    };
    (status, e.to_string())
}

fn dataset_err(e: DatasetError) -> Failure {
    let status = match e {
        DatasetError::Io(_) => AbcStatus::Io,
        _ => AbcStatus::Format,
    };
    (status, e.to_string())
}

fn expert_err(e: ExpertError) -> Failure {
    (AbcStatus::InvalidArgument, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AbcStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (AbcStatus::Ok, String::new()),
        Ok(Err(failure)) => failure,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (AbcStatus::Panic, msg)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (AbcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn joints(q: *const f64) -> Result<JointConfig, Failure> {
    if q.is_null() {
        return fail(AbcStatus::NullPointer, "joints is null");
    }
    let mut v = [0.0; NUM_JOINTS];
    v.copy_from_slice(std::slice::from_raw_parts(q, NUM_JOINTS));
    JointConfig::new(v).map_err(arm_err)
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(AbcStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(AbcStatus::InvalidArgument, "path is not UTF-8"),
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(AbcStatus::NullPointer, "output handle pointer is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(AbcStatus::NullPointer, "output pointer is null");
    }
    *out = value;
    Ok(())
}

unsafe fn copy_frame(bytes: &[u8], buf: *mut u8, len: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return fail(AbcStatus::NullPointer, "buffer is null");
    }
    if len < bytes.len() {
        return fail(
            AbcStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, frame needs {}", bytes.len()),
        );
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    Ok(())
}

/// Copies the last error message on this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the buffer
/// size needed for the whole message.
#[no_mangle]
pub unsafe extern "C" fn abc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Bytes in one RGB frame.
#[no_mangle]
pub extern "C" fn abc_frame_bytes() -> usize {
    FRAME_BYTES
}

/// Side of the square camera image in pixels.
#[no_mangle]
pub extern "C" fn abc_image_size() -> usize {
    IMAGE_SIZE
}

#[no_mangle]
pub unsafe extern "C" fn abc_scene_training(side: AbcSide, seed: u64, out: *mut *mut AbcScene) -> AbcStatus {
    guard(|| {
        let side = match side {
            AbcSide::Left => Side::Left,
            AbcSide::Right => Side::Right,
        };
        put(out, AbcScene(make_training_scene(side, seed).map_err(scene_err)?))
    })
}

/// Scene with the plant near `azimuth` radians, inside the intermediate band.
#[no_mangle]
pub unsafe extern "C" fn abc_scene_intermediate(azimuth: f64, seed: u64, out: *mut *mut AbcScene) -> AbcStatus {
    guard(|| put(out, AbcScene(make_intermediate_scene(azimuth, seed).map_err(scene_err)?)))
}

#[no_mangle]
pub unsafe extern "C" fn abc_scene_free(scene: *mut AbcScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Renders the wrist camera at joint configuration `q` (6 values) into `buf`.
#[no_mangle]
pub unsafe extern "C" fn abc_scene_render(scene: *const AbcScene, q: *const f64, buf: *mut u8, len: usize) -> AbcStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let frame = World::new(&scene.0).observe(&joints(q)?).map_err(arm_err)?;
        copy_frame(frame.as_bytes(), buf, len)
    })
}

/// Pixel distance from the plant centroid to the image center. `visible` is
/// set to 0 and `error` left untouched when no plant pixel is in view.
#[no_mangle]
pub unsafe extern "C" fn abc_scene_centering_error(scene: *const AbcScene, q: *const f64, error: *mut f64, visible: *mut i32) -> AbcStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        match World::new(&scene.0).centering_error(&joints(q)?).map_err(arm_err)? {
            Some(e) => {
                write_out(error, e)?;
                write_out(visible, 1)
            }
            None => write_out(visible, 0),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn abc_policy_load(path_: *const c_char, out: *mut *mut AbcPolicy) -> AbcStatus {
    guard(|| {
        let (policy, _) = Policy::load(&path(path_)?).map_err(policy_err)?;
        put(out, AbcPolicy(policy))
    })
}

#[no_mangle]
pub unsafe extern "C" fn abc_policy_free(policy: *mut AbcPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// History length and whether the policy predicts joint deltas (1) or
/// absolute joint targets (0).
#[no_mangle]
pub unsafe extern "C" fn abc_policy_info(policy: *const AbcPolicy, history: *mut usize, is_delta: *mut i32) -> AbcStatus {
    guard(|| {
        let cfg = &deref(policy, "policy")?.0.config;
        write_out(history, cfg.history)?;
        write_out(is_delta, (cfg.representation == Representation::Delta) as i32)
    })
}

/// Closed-loop rollout of `steps` control steps from the home pose. The
/// recorded trajectory is returned as an episode.
#[no_mangle]
pub unsafe extern "C" fn abc_rollout(
    policy: *const AbcPolicy,
    scene: *const AbcScene,
    steps: usize,
    out: *mut *mut AbcEpisode,
) -> AbcStatus {
    guard(|| {
        let policy = deref(policy, "policy")?;
        let scene = deref(scene, "scene")?;
        let result = rollout(&mut PolicyController::new(&policy.0), &scene.0, steps).map_err(policy_err)?;
        put(out, AbcEpisode(result.to_episode()))
    })
}

/// Scripted expert demonstration `index` of the set seeded by `master`.
#[no_mangle]
pub unsafe extern "C" fn abc_episode_expert(master: u64, index: usize, out: *mut *mut AbcEpisode) -> AbcStatus {
    guard(|| {
        put(
            out,
            AbcEpisode(gen_demo(master, index, &ExpertConfig::default()).map_err(expert_err)?),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn abc_episode_read(path_: *const c_char, out: *mut *mut AbcEpisode) -> AbcStatus {
    guard(|| put(out, AbcEpisode(read_episode(&path(path_)?).map_err(dataset_err)?)))
}

#[no_mangle]
pub unsafe extern "C" fn abc_episode_write(episode: *const AbcEpisode, path_: *const c_char) -> AbcStatus {
    guard(|| write_episode(&deref(episode, "episode")?.0, &path(path_)?).map_err(dataset_err))
}

#[no_mangle]
pub unsafe extern "C" fn abc_episode_free(episode: *mut AbcEpisode) {
    if !episode.is_null() {
        drop(Box::from_raw(episode));
    }
}

/// Number of timesteps in the episode.
#[no_mangle]
pub unsafe extern "C" fn abc_episode_len(episode: *const AbcEpisode, len: *mut usize) -> AbcStatus {
    guard(|| write_out(len, deref(episode, "episode")?.0.len()))
}

unsafe fn step<'a>(episode: *const AbcEpisode, t: usize) -> Result<(&'a Episode, usize), Failure> {
    let ep = &deref(episode, "episode")?.0;
    if t >= ep.len() {
        return fail(AbcStatus::InvalidArgument, format!("step {t} out of range for {} steps", ep.len()));
    }
    Ok((ep, t))
}

/// Copies the 6 joint values at step `t` into `q`.
#[no_mangle]
pub unsafe extern "C" fn abc_episode_joints(episode: *const AbcEpisode, t: usize, q: *mut f64) -> AbcStatus {
    guard(|| {
        let (ep, t) = step(episode, t)?;
        if q.is_null() {
            return fail(AbcStatus::NullPointer, "joints is null");
        }
        ptr::copy_nonoverlapping(ep.joints[t].0.as_ptr(), q, NUM_JOINTS);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn abc_episode_frame(episode: *const AbcEpisode, t: usize, buf: *mut u8, len: usize) -> AbcStatus {
    guard(|| {
        let (ep, t) = step(episode, t)?;
        copy_frame(ep.frames[t].as_bytes(), buf, len)
    })
}

/// Applies the success criterion to a recorded episode.
#[no_mangle]
pub unsafe extern "C" fn abc_episode_judge(episode: *const AbcEpisode, reason: *mut AbcReason) -> AbcStatus {
    guard(|| {
        let verdict = judge_episode(&deref(episode, "episode")?.0);
        let code = match verdict.reason {
            None => AbcReason::Success,
            Some(FailureReason::NoClose) => AbcReason::NoClose,
            Some(FailureReason::MultipleClose) => AbcReason::MultipleClose,
            Some(FailureReason::EarlyClose) => AbcReason::EarlyClose,
            Some(FailureReason::NotCentered) => AbcReason::NotCentered,
            Some(FailureReason::LostTarget) => AbcReason::LostTarget,
            Some(FailureReason::NumericFault) => AbcReason::NumericFault,
        };
        write_out(reason, code)
    })
}
