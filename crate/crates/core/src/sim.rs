//! One simulated workcell: the arm, the wrist camera and a grown plant.

use crate::arm::{apply_delta, clamp_delta, forward_kinematics, ArmError, ArmGeometry, JointConfig, JointDelta, JOINT_LIMITS};
use crate::render::{plant_centroid_px, render, CameraIntrinsics, Frame, IMAGE_CENTER};
use crate::scene::{grow_plant, PlantModel, SceneSpec};

#[derive(Debug, Clone)]
pub struct World {
    pub scene: SceneSpec,
    pub plant: PlantModel,
    pub geometry: ArmGeometry,
    pub intrinsics: CameraIntrinsics,
}

impl World {
    pub fn new(scene: &SceneSpec) -> Self {
        World {
            scene: *scene,
            plant: grow_plant(scene),
            geometry: ArmGeometry::default(),
            intrinsics: CameraIntrinsics::default(),
        }
    }

    pub fn observe(&self, q: &JointConfig) -> Result<Frame, ArmError> {
        let pose = forward_kinematics(&self.geometry, q)?;
        Ok(render(&self.plant, &pose, &self.intrinsics))
    }

    pub fn centroid(&self, q: &JointConfig) -> Result<Option<(f64, f64)>, ArmError> {
        let pose = forward_kinematics(&self.geometry, q)?;
        Ok(plant_centroid_px(&self.plant, &pose, &self.intrinsics))
    }

    /// Pixel distance of the plant centroid from the image centre.
    pub fn centering_error(&self, q: &JointConfig) -> Result<Option<f64>, ArmError> {
        Ok(self.centroid(q)?.map(centering_error))
    }

    /// One 10 Hz control step: clamp, apply, and quantize to `f32`.
    pub fn step(&self, q: &JointConfig, dq: &JointDelta) -> Result<JointConfig, ArmError> {
        Ok(quantize(&apply_delta(q, &clamp_delta(*dq))?))
    }
}

/// Gripper aperture below which the gripper counts as closed.
pub const GRIP_THRESHOLD: f64 = 0.2;

/// Frame indices `k` where the gripper crosses [`GRIP_THRESHOLD`] downward
/// between frames `k - 1` and `k`.
pub fn close_events(joints: &[JointConfig]) -> Vec<usize> {
    (1..joints.len())
        .filter(|&k| joints[k - 1].gripper() > GRIP_THRESHOLD && joints[k].gripper() <= GRIP_THRESHOLD)
        .collect()
}

pub fn centering_error((u, v): (f64, f64)) -> f64 {
    (u - IMAGE_CENTER).hypot(v - IMAGE_CENTER)
}

/// Rounds every joint to the nearest `f32` that stays inside its limits, so
/// trajectories survive the episode format unchanged.
pub fn quantize(q: &JointConfig) -> JointConfig {
    let mut out = q.0;
    for (i, v) in out.iter_mut().enumerate() {
        let (lo, hi) = JOINT_LIMITS[i];
        let mut r = *v as f32;
        if (r as f64) > hi {
            r = r.next_down();
        } else if (r as f64) < lo {
            r = r.next_up();
        }
        *v = r as f64;
    }
    JointConfig(out)
}
