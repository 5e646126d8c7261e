//! Kinematic model of the table-mounted 6-DOF arm and its wrist camera.
//!
//! Joint layout: `q0` base yaw, `q1` shoulder pitch, `q2` elbow pitch,
//! `q3` wrist pitch, `q4` wrist roll, `q5` gripper aperture (1 = open).
//! Positive pitch raises the distal link. The world frame has `x` forward,
//! `y` left and `z` up; the table surface is `z = 0`.

use std::f64::consts::PI;

use thiserror::Error;

pub const NUM_JOINTS: usize = 6;

/// Per-step bound on every component of a commanded joint delta.
pub const MAX_STEP: f64 = 0.3;

/// Inclusive `(lower, upper)` limits per joint.
pub const JOINT_LIMITS: [(f64, f64); NUM_JOINTS] = [(-1.2, 1.2), (-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5), (-PI, PI), (0.0, 1.0)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArmError {
    #[error("joint {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("joint {index} = {value} outside [{lo}, {hi}]")]
    OutOfLimits { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("invalid arm geometry: {0}")]
    Geometry(&'static str),
}

/// A full joint configuration (the commanded `a_t`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointConfig(pub [f64; NUM_JOINTS]);

/// Change between consecutive joint configurations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointDelta(pub [f64; NUM_JOINTS]);

impl JointConfig {
    /// Straight-out arm with the gripper open. Every rollout and
    /// demonstration starts here.
    pub const HOME: JointConfig = JointConfig([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn new(q: [f64; NUM_JOINTS]) -> Result<Self, ArmError> {
        let cfg = JointConfig(q);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ArmError> {
        for (index, (&value, &(lo, hi))) in self.0.iter().zip(JOINT_LIMITS.iter()).enumerate() {
            if !value.is_finite() {
                return Err(ArmError::NonFinite { index, value });
            }
            if value < lo || value > hi {
                return Err(ArmError::OutOfLimits { index, value, lo, hi });
            }
        }
        Ok(())
    }

    pub fn gripper(&self) -> f64 {
        self.0[5]
    }

    /// Componentwise `self - earlier`.
    pub fn delta_from(&self, earlier: &JointConfig) -> JointDelta {
        let mut d = [0.0; NUM_JOINTS];
        for (i, v) in d.iter_mut().enumerate() {
            *v = self.0[i] - earlier.0[i];
        }
        JointDelta(d)
    }

    /// L∞ distance over the five arm joints (gripper excluded).
    pub fn arm_distance_linf(&self, other: &JointConfig) -> f64 {
        (0..5).map(|i| (self.0[i] - other.0[i]).abs()).fold(0.0, f64::max)
    }
}

impl JointDelta {
    pub const ZERO: JointDelta = JointDelta([0.0; NUM_JOINTS]);

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Clamps every component of `dq` to `[-MAX_STEP, MAX_STEP]`.
pub fn clamp_delta(dq: JointDelta) -> JointDelta {
    let mut out = dq.0;
    for v in out.iter_mut() {
        *v = v.clamp(-MAX_STEP, MAX_STEP);
    }
    JointDelta(out)
}

/// `q + dq`, with the result clamped into the joint limits.
pub fn apply_delta(q: &JointConfig, dq: &JointDelta) -> Result<JointConfig, ArmError> {
    for (index, &value) in dq.0.iter().enumerate() {
        if !value.is_finite() {
            return Err(ArmError::NonFinite { index, value });
        }
    }
    let mut out = [0.0; NUM_JOINTS];
    for i in 0..NUM_JOINTS {
        let (lo, hi) = JOINT_LIMITS[i];
        out[i] = (q.0[i] + dq.0[i]).clamp(lo, hi);
    }
    Ok(JointConfig(out))
}

/// Link lengths and camera mounting of the arm.
///
/// `links[0]` is the fixed horizontal offset from the yaw axis to the
/// shoulder, `links[1]` shoulder to elbow, `links[2]` elbow to wrist pitch
/// and `links[3]` wrist pitch to the camera. The wrist roll joint sits on
/// the last link, `camera_offset` behind the camera, so the camera lies on
/// the roll axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmGeometry {
    pub links: [f64; 4],
    pub base_height: f64,
    pub camera_offset: f64,
}

impl Default for ArmGeometry {
    fn default() -> Self {
        ArmGeometry {
            links: [0.12, 0.14, 0.12, 0.06],
            base_height: 0.07,
            camera_offset: 0.03,
        }
    }
}

impl ArmGeometry {
    pub fn validate(&self) -> Result<(), ArmError> {
        if self.links.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(ArmError::Geometry("link lengths must be positive"));
        }
        if !(self.base_height.is_finite() && self.base_height > 0.0) {
            return Err(ArmError::Geometry("base height must be positive"));
        }
        if !(self.camera_offset > 0.0 && self.camera_offset <= self.links[3]) {
            return Err(ArmError::Geometry("camera offset must lie within the last link"));
        }
        Ok(())
    }
}

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// World-frame pose of the wrist camera. Columns of `orientation` are the
/// camera's forward, left and up axes expressed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub orientation: Mat3,
}

impl CameraPose {
    pub fn forward(&self) -> Vec3 {
        column(&self.orientation, 0)
    }

    /// Expresses a world point in camera coordinates (forward, left, up).
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.position);
        let r = &self.orientation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let r = &self.orientation;
        let rtr = mat_mul(&transpose(r), r);
        let ortho = (0..3).all(|i| {
            (0..3).all(|j| {
                let want = if i == j { 1.0 } else { 0.0 };
                (rtr[i][j] - want).abs() <= tol
            })
        });
        ortho && (det(r) - 1.0).abs() <= tol
    }
}

pub(crate) fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rotation about world/local `z`.
pub(crate) fn rot_yaw(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Pitch rotation; positive angles tip the local `x` axis upward.
fn rot_pitch(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

fn rot_roll(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

/// Wrist-camera pose for joint configuration `q`.
pub fn forward_kinematics(geom: &ArmGeometry, q: &JointConfig) -> Result<CameraPose, ArmError> {
    q.validate()?;
    geom.validate()?;
    let [l1, l2, l3, l4] = geom.links;
    let q = &q.0;

    let mut rot = rot_yaw(q[0]);
    let mut pos = [0.0, 0.0, geom.base_height];
    pos = add(pos, mat_vec(&rot, [l1, 0.0, 0.0]));

    rot = mat_mul(&rot, &rot_pitch(q[1]));
    pos = add(pos, mat_vec(&rot, [l2, 0.0, 0.0]));

    rot = mat_mul(&rot, &rot_pitch(q[2]));
    pos = add(pos, mat_vec(&rot, [l3, 0.0, 0.0]));

    rot = mat_mul(&rot, &rot_pitch(q[3]));
    pos = add(pos, mat_vec(&rot, [l4 - geom.camera_offset, 0.0, 0.0]));

    rot = mat_mul(&rot, &rot_roll(q[4]));
    pos = add(pos, mat_vec(&rot, [geom.camera_offset, 0.0, 0.0]));

    Ok(CameraPose {
        position: pos,
        orientation: rot,
    })
}
