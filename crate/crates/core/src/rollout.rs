//! Closed-loop execution of a controller in the simulator and the success
//! verdict for a joint trajectory.

use std::fmt;

use crate::arm::{JointConfig, JointDelta, NUM_JOINTS};
use crate::dataset::{Episode, EpisodeMeta, Representation, FORMAT_VERSION};
use crate::policy::{Policy, PolicyError};
use crate::render::Frame;
use crate::scene::SceneSpec;
use crate::sim::{close_events, World};

/// Control steps per rollout: 10 s at 10 Hz.
pub const ROLLOUT_STEPS: usize = 100;
/// Pixel radius around the image centre that counts as centred.
pub const CENTER_TOL_PX: f64 = 8.0;
/// Consecutive centred frames required right before the close.
pub const STABLE_FRAMES: usize = 5;

/// Anything that maps a frame history to a six-joint prediction.
pub trait Controller {
    fn representation(&self) -> Representation;
    fn history_len(&self) -> usize;
    /// `frames` holds every frame captured so far; `window` lists the
    /// `history_len()` indices, oldest first, that make up the history.
    fn predict(&mut self, frames: &[Frame], window: &[usize]) -> Result<[f64; NUM_JOINTS], PolicyError>;
}

/// Runs a trained policy, encoding each captured frame once.
pub struct PolicyController<'a> {
    policy: &'a Policy,
    features: Vec<Vec<f32>>,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy) -> Self {
        PolicyController {
            policy,
            features: Vec::new(),
        }
    }
}

impl Controller for PolicyController<'_> {
    fn representation(&self) -> Representation {
        self.policy.config.representation
    }

    fn history_len(&self) -> usize {
        self.policy.config.history
    }

    fn predict(&mut self, frames: &[Frame], window: &[usize]) -> Result<[f64; NUM_JOINTS], PolicyError> {
        while self.features.len() < frames.len() {
            let f = self.policy.encode_frame(&frames[self.features.len()])?;
            self.features.push(f);
        }
        let hist: Vec<&[f32]> = window.iter().map(|&i| self.features[i].as_slice()).collect();
        Ok(self.policy.predict_from_features(&hist)?.map(|v| v as f64))
    }
}

/// Plays back a fixed delta sequence, one entry per step, then zeros.
pub struct ReplayController {
    pub deltas: Vec<JointDelta>,
}

impl ReplayController {
    pub fn from_episode(ep: &Episode) -> Self {
        ReplayController {
            deltas: ep.joints.windows(2).map(|w| w[1].delta_from(&w[0])).collect(),
        }
    }
}

impl Controller for ReplayController {
    fn representation(&self) -> Representation {
        Representation::Delta
    }

    fn history_len(&self) -> usize {
        1
    }

    fn predict(&mut self, frames: &[Frame], _window: &[usize]) -> Result<[f64; NUM_JOINTS], PolicyError> {
        Ok(self.deltas.get(frames.len() - 1).map_or([0.0; NUM_JOINTS], |d| d.0))
    }
}

/// Always predicts a zero delta.
pub struct ZeroController;

impl Controller for ZeroController {
    fn representation(&self) -> Representation {
        Representation::Delta
    }

    fn history_len(&self) -> usize {
        1
    }

    fn predict(&mut self, _frames: &[Frame], _window: &[usize]) -> Result<[f64; NUM_JOINTS], PolicyError> {
        Ok([0.0; NUM_JOINTS])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    NoClose,
    MultipleClose,
    EarlyClose,
    NotCentered,
    LostTarget,
    /// The controller produced a non-finite or otherwise unusable output.
    NumericFault,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::NoClose => "no_close",
            FailureReason::MultipleClose => "multiple_close",
            FailureReason::EarlyClose => "early_close",
            FailureReason::NotCentered => "not_centered",
            FailureReason::LostTarget => "lost_target",
            FailureReason::NumericFault => "numeric_fault",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub success: bool,
    pub reason: Option<FailureReason>,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason {
            None => f.write_str("success"),
            Some(r) => write!(f, "failure ({r})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub scene: SceneSpec,
    pub frames: Vec<Frame>,
    pub joints: Vec<JointConfig>,
    /// Prediction made at each step; one fewer than the frames.
    pub predictions: Vec<[f64; NUM_JOINTS]>,
    pub gripper_close_events: Vec<usize>,
    pub centering_error_px: Vec<Option<f64>>,
    pub verdict: Verdict,
}

impl RolloutResult {
    pub fn final_joints(&self) -> JointConfig {
        *self.joints.last().expect("rollouts start with the home frame")
    }

    /// The trace as an episode file, for replay and inspection.
    pub fn to_episode(&self) -> Episode {
        Episode {
            frames: self.frames.clone(),
            joints: self.joints.clone(),
            meta: EpisodeMeta {
                scene: self.scene,
                expert_seed: 0,
                format_version: FORMAT_VERSION,
            },
        }
    }
}

/// History indices for step `t`: frames `t-H+1 ..= t`, with earlier ones
/// replaced by frame 0.
pub fn history_window(t: usize, h: usize) -> Vec<usize> {
    (0..h).map(|k| (t + k + 1).saturating_sub(h)).collect()
}

pub fn rollout(ctrl: &mut dyn Controller, scene: &SceneSpec, steps: usize) -> Result<RolloutResult, PolicyError> {
    let world = World::new(scene);
    let h = ctrl.history_len();
    let repr = ctrl.representation();
    let mut q = JointConfig::HOME;
    let mut frames = vec![observe(&world, &q)?];
    let mut joints = vec![q];
    let mut predictions = Vec::with_capacity(steps);
    let mut fault = false;

    for t in 0..steps {
        let window = history_window(t, h);
        let pred = match ctrl.predict(&frames, &window) {
            Ok(p) if p.iter().all(|v| v.is_finite()) => p,
            Ok(_) | Err(PolicyError::Nn(_)) => {
                fault = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let dq = match repr {
            Representation::Delta => JointDelta(pred),
            Representation::Absolute => JointDelta(std::array::from_fn(|i| pred[i] - q.0[i])),
        };
        q = world.step(&q, &dq).map_err(|e| PolicyError::Config(e.to_string()))?;
        predictions.push(pred);
        frames.push(observe(&world, &q)?);
        joints.push(q);
    }

    let centering_error_px = joints
        .iter()
        .map(|q| world.centering_error(q).map_err(|e| PolicyError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let verdict = if fault {
        Verdict {
            success: false,
            reason: Some(FailureReason::NumericFault),
        }
    } else {
        judge(&joints, &centering_error_px)
    };
    Ok(RolloutResult {
        scene: *scene,
        gripper_close_events: close_events(&joints),
        frames,
        joints,
        predictions,
        centering_error_px,
        verdict,
    })
}

fn observe(world: &World, q: &JointConfig) -> Result<Frame, PolicyError> {
    world.observe(q).map_err(|e| PolicyError::Config(e.to_string()))
}

fn centered(e: Option<f64>) -> bool {
    e.is_some_and(|e| e <= CENTER_TOL_PX)
}

/// Success iff the gripper closes exactly once, the plant is centred at the
/// closing frame, and it was centred for the [`STABLE_FRAMES`] frames before.
pub fn judge(joints: &[JointConfig], centering_error_px: &[Option<f64>]) -> Verdict {
    let fail = |r| Verdict {
        success: false,
        reason: Some(r),
    };
    let events = close_events(joints);
    let k = match events.as_slice() {
        [] => return fail(FailureReason::NoClose),
        [k] => *k,
        _ => return fail(FailureReason::MultipleClose),
    };
    let errors = &centering_error_px[..=k];
    let stabilized_before = errors[..k].windows(STABLE_FRAMES).any(|w| w.iter().all(|&e| centered(e)));
    if !stabilized_before {
        return fail(FailureReason::EarlyClose);
    }
    let preceding = &errors[k - STABLE_FRAMES..k];
    if errors[k].is_none() || preceding.iter().any(Option::is_none) {
        return fail(FailureReason::LostTarget);
    }
    if !centered(errors[k]) || !preceding.iter().all(|&e| centered(e)) {
        return fail(FailureReason::NotCentered);
    }
    Verdict {
        success: true,
        reason: None,
    }
}

/// Verdict for a recorded episode, e.g. an expert or teleoperated demonstration.
pub fn judge_episode(ep: &Episode) -> Verdict {
    let world = World::new(&ep.meta.scene);
    let errors: Vec<Option<f64>> = ep.joints.iter().map(|q| world.centering_error(q).ok().flatten()).collect();
    judge(&ep.joints, &errors)
}
