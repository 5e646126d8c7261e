//! Scripted demonstrator: centres the plant with yaw and wrist pitch, waits
//! until the view is stable, then closes the gripper once and holds.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::arm::{ArmError, JointConfig, JointDelta, NUM_JOINTS};
use crate::dataset::{DatasetError, Episode, EpisodeMeta, FORMAT_VERSION};
use crate::render::IMAGE_CENTER;
use crate::scene::{make_training_scene, SceneError, SceneSpec, Side};
use crate::sim::{centering_error, close_events, World};

/// Per-step gripper change while closing. The step clamp rules out a
/// three-step ramp, so the ramp takes four.
pub const GRIP_RAMP_STEP: f64 = 0.25;
/// Longest run of frames without a visible plant before the expert gives up.
pub const MAX_LOST_FRAMES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    /// Radians of joint motion per pixel of centring error.
    pub gain: f64,
    /// Standard deviation of the actuation noise on joints 0..=4, radians.
    pub noise_sigma: f64,
    pub center_tol: f64,
    pub settle_frames: usize,
    pub episode_len: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            gain: 0.004,
            noise_sigma: 0.005,
            center_tol: 4.0,
            settle_frames: 5,
            episode_len: 100,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("invalid expert config: {0}")]
    Config(&'static str),
    #[error("plant lost for more than {MAX_LOST_FRAMES} consecutive frames at step {step}")]
    LostTarget { step: usize },
    #[error("expert self-check failed: {0}")]
    SelfCheck(String),
    #[error(transparent)]
    Arm(#[from] ArmError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<(), ExpertError> {
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(ExpertError::Config("gain must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(ExpertError::Config("noise sigma must be non-negative"));
        }
        if self.center_tol.is_nan() || self.center_tol < 1.0 {
            return Err(ExpertError::Config("center tolerance must be at least 1 px"));
        }
        if self.settle_frames < 1 {
            return Err(ExpertError::Config("settle frames must be at least 1"));
        }
        if self.episode_len < 30 {
            return Err(ExpertError::Config("episodes must be at least 30 frames"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Approach { settled: usize },
    Closing,
    Hold,
}

pub fn run_expert(scene: &SceneSpec, cfg: &ExpertConfig, seed: u64) -> Result<Episode, ExpertError> {
    cfg.validate()?;
    let world = World::new(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A zero sigma still goes through the sampler so the stream layout does not depend on it.
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let mut q = JointConfig::HOME;
    let mut frames = vec![world.observe(&q)?];
    let mut joints = vec![q];
    let mut phase = Phase::Approach { settled: 0 };
    let mut lost = 0usize;

    for step in 0..cfg.episode_len - 1 {
        let mut dq = [0.0; NUM_JOINTS];
        match phase {
            Phase::Approach { settled } => {
                let settled = match world.centroid(&q)? {
                    Some(c) => {
                        lost = 0;
                        if centering_error(c) <= cfg.center_tol {
                            settled + 1
                        } else {
                            0
                        }
                    }
                    None => {
                        lost += 1;
                        if lost > MAX_LOST_FRAMES {
                            return Err(ExpertError::LostTarget { step });
                        }
                        0
                    }
                };
                if settled >= cfg.settle_frames {
                    phase = Phase::Closing;
                    dq[5] = -GRIP_RAMP_STEP;
                } else {
                    phase = Phase::Approach { settled };
                    if let Some((u, v)) = world.centroid(&q)? {
                        dq[0] = cfg.gain * (IMAGE_CENTER - u);
                        dq[3] = cfg.gain * (IMAGE_CENTER - v);
                    }
                    if cfg.noise_sigma > 0.0 {
                        for d in dq.iter_mut().take(5) {
                            *d += noise.sample(&mut rng);
                        }
                    }
                }
            }
            Phase::Closing => {
                if q.gripper() > 0.0 {
                    dq[5] = -GRIP_RAMP_STEP;
                } else {
                    phase = Phase::Hold;
                }
            }
            Phase::Hold => {}
        }
        q = world.step(&q, &JointDelta(dq))?;
        frames.push(world.observe(&q)?);
        joints.push(q);
    }

    self_check(&world, &joints, cfg)?;
    let meta = EpisodeMeta {
        scene: *scene,
        expert_seed: seed,
        format_version: FORMAT_VERSION,
    };
    Ok(Episode::new(frames, joints, meta)?)
}

fn self_check(world: &World, joints: &[JointConfig], cfg: &ExpertConfig) -> Result<(), ExpertError> {
    let events = close_events(joints);
    if events.len() != 1 {
        return Err(ExpertError::SelfCheck(format!("{} gripper closures", events.len())));
    }
    let last = joints.last().expect("non-empty");
    if last.gripper() != 0.0 {
        return Err(ExpertError::SelfCheck(format!("final gripper {}", last.gripper())));
    }
    match world.centering_error(last)? {
        Some(e) if e <= cfg.center_tol => Ok(()),
        other => Err(ExpertError::SelfCheck(format!("final centring error {other:?}"))),
    }
}

/// Scene and expert seeds for demonstration `index` of a set.
pub fn demo_seeds(master: u64, index: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    (rng.next_u64(), rng.next_u64())
}

pub fn demo_side(index: usize) -> Side {
    if index.is_multiple_of(2) {
        Side::Left
    } else {
        Side::Right
    }
}

/// Demonstration `index` of the set generated from `master`.
pub fn gen_demo(master: u64, index: usize, cfg: &ExpertConfig) -> Result<Episode, ExpertError> {
    let (scene_seed, expert_seed) = demo_seeds(master, index);
    let scene = make_training_scene(demo_side(index), scene_seed)?;
    run_expert(&scene, cfg, expert_seed)
}

/// `n` demonstrations alternating left, right, left, ...
pub fn gen_demo_set(n: usize, seed: u64, cfg: &ExpertConfig) -> Result<Vec<Episode>, ExpertError> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(ExpertError::Config("demo count must be even and positive"));
    }
    (0..n).map(|i| gen_demo(seed, i, cfg)).collect()
}
