//! Procedural plant and its placement in front of the arm.
//!
//! Placements are polar coordinates about the home camera position:
//! `plant_azimuth` is the bearing seen from the camera at the home pose
//! (positive = left, which appears image-left) and `plant_range` the
//! horizontal distance from that point. `plant_height` is the height of the
//! plant's centre above the table.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arm::{forward_kinematics, ArmGeometry, JointConfig};
use crate::render::{visible_fraction, CameraIntrinsics};

pub const TRAINING_AZIMUTH: f64 = 0.55;
pub const AZIMUTH_JITTER: f64 = 0.03;
pub const TRAINING_RANGE: f64 = 0.35;
pub const RANGE_JITTER: f64 = 0.02;
pub const PLANT_HEIGHT: f64 = 0.29;
pub const HEIGHT_JITTER: f64 = 0.01;

/// Bearing band accepted for intermediate placements.
pub const INTERMEDIATE_BAND: (f64, f64) = (0.15, 0.50);
/// Bearing band of any valid scene.
pub const AZIMUTH_BAND: (f64, f64) = (0.15, 0.70);
pub const RANGE_BAND: (f64, f64) = (0.25, 0.45);

/// Visible-fraction band that counts as "partially visible".
pub const PARTIAL_VISIBILITY: (f64, f64) = (0.05, 0.90);

const CLUSTER_RADIUS: f64 = 0.075;
const SPHERE_RADIUS: (f64, f64) = (0.006, 0.018);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("azimuth {0} outside the intermediate band [0.15, 0.50]")]
    NotIntermediate(f64),
    #[error("scene seed {seed}: visible fraction {fraction:.3} at home pose is not partial")]
    NotPartiallyVisible { seed: u64, fraction: f64 },
    #[error("unknown side label {0:?}")]
    BadLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SideLabel {
    Left,
    Right,
    Intermediate,
}

impl From<Side> for SideLabel {
    fn from(s: Side) -> Self {
        match s {
            Side::Left => SideLabel::Left,
            Side::Right => SideLabel::Right,
        }
    }
}

impl fmt::Display for SideLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SideLabel::Left => "left",
            SideLabel::Right => "right",
            SideLabel::Intermediate => "intermediate",
        })
    }
}

impl FromStr for SideLabel {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(SideLabel::Left),
            "right" => Ok(SideLabel::Right),
            "intermediate" => Ok(SideLabel::Intermediate),
            other => Err(SceneError::BadLabel(other.to_string())),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        SideLabel::from(*self).fmt(f)
    }
}

impl FromStr for Side {
    type Err = SceneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(SceneError::BadLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub plant_azimuth: f64,
    pub plant_range: f64,
    pub plant_height: f64,
    pub seed: u64,
    pub side_label: SideLabel,
}

impl SceneSpec {
    /// World position of the plant centre.
    pub fn anchor(&self) -> [f64; 3] {
        let home = home_camera_position();
        [
            home[0] + self.plant_range * self.plant_azimuth.cos(),
            home[1] + self.plant_range * self.plant_azimuth.sin(),
            self.plant_height,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub spheres: Vec<Sphere>,
    pub anchor: [f64; 3],
    pub seed: u64,
}

fn home_camera_position() -> [f64; 3] {
    forward_kinematics(&ArmGeometry::default(), &JointConfig::HOME)
        .expect("home configuration is valid")
        .position
}

// Decorrelates the streams used for placement jitter and plant growth.
const PLACEMENT_STREAM: u64 = 0x5ce9_e5ee_d000_0001;
const GROWTH_STREAM: u64 = 0x5ce9_e5ee_d000_0002;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fraction of plant sphere centres visible from the home pose.
pub fn home_visibility(spec: &SceneSpec) -> f64 {
    let pose = forward_kinematics(&ArmGeometry::default(), &JointConfig::HOME).expect("home is valid");
    visible_fraction(&grow_plant(spec), &pose, &CameraIntrinsics::default())
}

pub fn is_partially_visible(fraction: f64) -> bool {
    (PARTIAL_VISIBILITY.0..=PARTIAL_VISIBILITY.1).contains(&fraction)
}

fn jittered(azimuth: f64, seed: u64, label: SideLabel) -> SceneSpec {
    let mut rng = rng_for(seed, PLACEMENT_STREAM);
    let az = rng.random_range(-AZIMUTH_JITTER..=AZIMUTH_JITTER);
    // Jitter is mirrored with the side so left and right scenes of one seed are symmetric.
    let range = rng.random_range(-RANGE_JITTER..=RANGE_JITTER);
    let height = rng.random_range(-HEIGHT_JITTER..=HEIGHT_JITTER);
    SceneSpec {
        plant_azimuth: azimuth + az * azimuth.signum(),
        plant_range: TRAINING_RANGE + range,
        plant_height: PLANT_HEIGHT + height,
        seed,
        side_label: label,
    }
}

/// Left/right placement used for demonstrations and evaluation rollouts.
///
/// Fails only if the generated plant would not be partially visible at the
/// home pose, which the placement constants are chosen to rule out.
pub fn make_training_scene(side: Side, seed: u64) -> Result<SceneSpec, SceneError> {
    let azimuth = match side {
        Side::Left => TRAINING_AZIMUTH,
        Side::Right => -TRAINING_AZIMUTH,
    };
    let spec = jittered(azimuth, seed, side.into());
    let fraction = home_visibility(&spec);
    if !is_partially_visible(fraction) {
        return Err(SceneError::NotPartiallyVisible { seed, fraction });
    }
    Ok(spec)
}

/// Placement between the two training positions. Callers check partial
/// visibility themselves.
pub fn make_intermediate_scene(azimuth: f64, seed: u64) -> Result<SceneSpec, SceneError> {
    let mag = azimuth.abs();
    if !(INTERMEDIATE_BAND.0..=INTERMEDIATE_BAND.1).contains(&mag) {
        return Err(SceneError::NotIntermediate(azimuth));
    }
    Ok(jittered(azimuth, seed, SideLabel::Intermediate))
}

/// Grows the sphere cluster for `spec`. Sphere offsets are re-centred so
/// the cluster's mean centre is exactly the anchor.
pub fn grow_plant(spec: &SceneSpec) -> PlantModel {
    let mut rng = rng_for(spec.seed, GROWTH_STREAM);
    let anchor = spec.anchor();
    let count = rng.random_range(20..=40usize);

    // Fibonacci-lattice directions keep the silhouette's extent stable
    // across seeds; the seed perturbs the lattice phase and each radius.
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let offsets: Vec<[f64; 3]> = (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let ring = (1.0 - z * z).sqrt();
            let theta = phase + golden * i as f64;
            let scale = CLUSTER_RADIUS * rng.random_range(0.55..=1.0);
            [ring * theta.cos() * scale, ring * theta.sin() * scale, z * scale]
        })
        .collect();
    let mut mean = [0.0; 3];
    for o in &offsets {
        for k in 0..3 {
            mean[k] += o[k] / count as f64;
        }
    }

    let spheres = offsets
        .into_iter()
        .map(|o| {
            let center = [anchor[0] + o[0] - mean[0], anchor[1] + o[1] - mean[1], anchor[2] + o[2] - mean[2]];
            let radius = rng.random_range(SPHERE_RADIUS.0..=SPHERE_RADIUS.1);
            let g: u8 = rng.random_range(120..=210);
            let r: u8 = rng.random_range(20..=g - 40);
            let b: u8 = rng.random_range(10..=g - 60);
            Sphere {
                center,
                radius,
                color: [r, g, b],
            }
        })
        .collect();

    PlantModel {
        spheres,
        anchor,
        seed: spec.seed,
    }
}

/// Visible fraction of `plant` from an arbitrary camera pose.
pub fn check_partial_visibility(plant: &PlantModel, pose: &crate::arm::CameraPose) -> f64 {
    visible_fraction(plant, pose, &CameraIntrinsics::default())
}
