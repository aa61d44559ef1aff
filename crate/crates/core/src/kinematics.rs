//! Planar (sagittal) quadruped morphology and kinematics.
//!
//! Conventions used throughout the crate:
//!
//! * The world plane is spanned by `x` (forward) and `z` (up).
//! * All angles are counter-clockwise positive when viewed with `x` to the
//!   right and `z` up. A positive pitch lifts the nose.
//! * A link at absolute angle `phi` points along `(sin phi, -cos phi)`, so
//!   angle zero hangs straight down.
//! * Each leg is a hip joint followed by a knee joint. The knee bends with a
//!   positive angle, which places the knee behind the foot ("knee-backward").
//! * Joint order is front-left hip, front-left knee, front-right hip,
//!   front-right knee, rear-left hip, rear-left knee, rear-right hip,
//!   rear-right knee. Left and right legs of a pair share a hip point.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_LEGS: usize = 4;
pub const NUM_JOINTS: usize = 8;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "FL_hip", "FL_knee", "FR_hip", "FR_knee", "RL_hip", "RL_knee", "RR_hip", "RR_knee",
];

pub const LEG_NAMES: [&str; NUM_LEGS] = ["FL", "FR", "RL", "RR"];

pub type Vec2 = Vector2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("foot target for leg {leg} is unreachable (distance {distance:.6} m from hip)")]
    UnreachableTarget { leg: usize, distance: f64 },
    #[error("invalid morphology: {0}")]
    InvalidMorphology(String),
    #[error("failed to read morphology: {0}")]
    Io(String),
}

/// Kinematic and inertial description of the robot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Morphology {
    pub thigh_length: f64,
    pub shank_length: f64,
    pub thigh_mass: f64,
    pub shank_mass: f64,
    pub base_mass: f64,
    /// Base body length along `x` (m).
    pub base_length: f64,
    /// Base body thickness along `z` (m).
    pub base_thickness: f64,
    /// Hip positions in the base frame, `[front, rear]`, as `[x, z]`.
    pub hip_offsets: [[f64; 2]; 2],
    pub hip_limits: [f64; 2],
    pub knee_limits: [f64; 2],
    pub torque_limit: f64,
    pub gravity: f64,
}

impl Default for Morphology {
    fn default() -> Self {
        Morphology {
            thigh_length: 0.2,
            shank_length: 0.2,
            thigh_mass: 0.3,
            shank_mass: 0.3,
            base_mass: 4.7,
            base_length: 0.4,
            base_thickness: 0.1,
            hip_offsets: [[0.19, 0.0], [-0.19, 0.0]],
            hip_limits: [-1.0, 1.0],
            knee_limits: [0.1, 2.6],
            torque_limit: 33.5,
            gravity: 9.81,
        }
    }
}

impl Morphology {
    pub fn from_json_str(text: &str) -> Result<Self, KinematicsError> {
        let morph: Morphology =
            serde_json::from_str(text).map_err(|e| KinematicsError::Io(e.to_string()))?;
        morph.validate()?;
        Ok(morph)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| KinematicsError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let positive = [
            ("thigh_length", self.thigh_length),
            ("shank_length", self.shank_length),
            ("thigh_mass", self.thigh_mass),
            ("shank_mass", self.shank_mass),
            ("base_mass", self.base_mass),
            ("base_length", self.base_length),
            ("base_thickness", self.base_thickness),
            ("torque_limit", self.torque_limit),
            ("gravity", self.gravity),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(KinematicsError::InvalidMorphology(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        for (name, [lo, hi]) in [("hip_limits", self.hip_limits), ("knee_limits", self.knee_limits)] {
            if !(lo < hi) {
                return Err(KinematicsError::InvalidMorphology(format!(
                    "{name} lower bound {lo} must be below upper bound {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn leg_mass(&self) -> f64 {
        self.thigh_mass + self.shank_mass
    }

    pub fn total_mass(&self) -> f64 {
        self.base_mass + NUM_LEGS as f64 * self.leg_mass()
    }

    /// Total weight `W` in newtons.
    pub fn weight(&self) -> f64 {
        self.gravity * self.total_mass()
    }

    pub fn hip_offset(&self, leg: usize) -> Vec2 {
        let [x, z] = self.hip_offsets[leg / 2];
        Vec2::new(x, z)
    }

    pub fn joint_lower(&self) -> [f64; NUM_JOINTS] {
        std::array::from_fn(|j| if j % 2 == 0 { self.hip_limits[0] } else { self.knee_limits[0] })
    }

    pub fn joint_upper(&self) -> [f64; NUM_JOINTS] {
        std::array::from_fn(|j| if j % 2 == 0 { self.hip_limits[1] } else { self.knee_limits[1] })
    }

    /// Joint angles that put every foot directly below its hip at `height`.
    pub fn standing_pose(&self, height: f64) -> [f64; NUM_JOINTS] {
        let base = BasePose { z: height, ..BasePose::default() };
        let targets: [Vec2; NUM_LEGS] = std::array::from_fn(|leg| {
            let hip = self.hip_offset(leg);
            Vec2::new(hip.x, 0.0)
        });
        inverse_kinematics(self, &base, &targets).expect("standing height within leg reach")
    }

    /// Default standing height used for reference clips and teleop resets.
    pub fn nominal_height(&self) -> f64 {
        0.9 * (self.thigh_length + self.shank_length)
    }
}

/// Planar base pose and its time derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub z: f64,
    pub pitch: f64,
    pub vx: f64,
    pub vz: f64,
    pub pitch_rate: f64,
}

impl BasePose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.z)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.vx, self.vz)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Unit vector of a link at absolute angle `phi`.
#[inline]
pub fn link_dir(phi: f64) -> Vec2 {
    let (s, c) = phi.sin_cos();
    Vec2::new(s, -c)
}

/// Counter-clockwise quarter turn.
#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

#[inline]
fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Expresses a world-frame vector in the base frame (rotation by `-pitch`).
pub fn base_frame(base: &BasePose, world: Vec2) -> Vec2 {
    rotate(world, -base.pitch)
}

pub fn inverse_base_frame(base: &BasePose, local: Vec2) -> Vec2 {
    rotate(local, base.pitch)
}

/// Hip, knee and foot positions of one leg in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegPoints {
    pub hip: Vec2,
    pub knee: Vec2,
    pub foot: Vec2,
}

pub fn leg_points(morph: &Morphology, base: &BasePose, q: &[f64; NUM_JOINTS], leg: usize) -> LegPoints {
    let hip = base.position() + inverse_base_frame(base, morph.hip_offset(leg));
    let thigh_angle = base.pitch + q[2 * leg];
    let shank_angle = thigh_angle + q[2 * leg + 1];
    let knee = hip + morph.thigh_length * link_dir(thigh_angle);
    let foot = knee + morph.shank_length * link_dir(shank_angle);
    LegPoints { hip, knee, foot }
}

pub fn forward_kinematics(morph: &Morphology, base: &BasePose, q: &[f64; NUM_JOINTS]) -> [Vec2; NUM_LEGS] {
    std::array::from_fn(|leg| leg_points(morph, base, q, leg).foot)
}

/// Analytic two-link inverse kinematics on the knee-backward branch.
pub fn inverse_kinematics(
    morph: &Morphology,
    base: &BasePose,
    targets: &[Vec2; NUM_LEGS],
) -> Result<[f64; NUM_JOINTS], KinematicsError> {
    let (l1, l2) = (morph.thigh_length, morph.shank_length);
    let mut q = [0.0; NUM_JOINTS];
    for (leg, target) in targets.iter().enumerate() {
        let hip = base.position() + inverse_base_frame(base, morph.hip_offset(leg));
        let local = base_frame(base, target - hip);
        let distance = local.norm();
        let slack = 1e-12 * (l1 + l2);
        if distance > l1 + l2 + slack || distance < (l1 - l2).abs() - slack || !distance.is_finite() {
            return Err(KinematicsError::UnreachableTarget { leg, distance });
        }
        let cos_knee = ((distance * distance - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
        let knee = cos_knee.acos();
        let reach_angle = local.x.atan2(-local.y);
        let inner = (l2 * knee.sin()).atan2(l1 + l2 * knee.cos());
        q[2 * leg] = wrap_angle(reach_angle - inner);
        q[2 * leg + 1] = knee;
    }
    Ok(q)
}
