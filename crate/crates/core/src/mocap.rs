//! Reference motion clips: file format, procedural gait generation,
//! retargeting through inverse kinematics, finite-difference velocities and
//! transition sampling.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amp::{disc_observation, AmpObservation};
use crate::kinematics::{
    forward_kinematics, inverse_kinematics, wrap_angle, BasePose, JointState, KinematicsError, Morphology, Vec2,
    JOINT_NAMES, NUM_JOINTS, NUM_LEGS,
};

#[derive(Debug, Error)]
pub enum ClipError {
    #[error("failed to read clip {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed clip: {0}")]
    Parse(String),
    #[error("clip schema violation: {0}")]
    Schema(String),
    #[error("frame {frame}: joint {joint} = {value:.4} rad outside [{lower}, {upper}]")]
    LimitViolation { frame: usize, joint: &'static str, value: f64, lower: f64, upper: f64 },
    #[error("invalid gait request: {0}")]
    InvalidGait(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// One retargeted reference frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipFrame {
    /// `[x, z, pitch]`.
    pub base: [f64; 3],
    pub q: [f64; NUM_JOINTS],
    /// World foot positions `[x, z]`.
    pub feet: [[f64; 2]; NUM_LEGS],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameVelocity {
    /// `[vx, vz, pitch_rate]`.
    pub base: [f64; 3],
    pub qd: [f64; NUM_JOINTS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub name: String,
    pub fps: f64,
    pub frames: Vec<ClipFrame>,
    pub velocities: Vec<FrameVelocity>,
}

// On-disk schema.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipDocument {
    name: String,
    fps: f64,
    joints: Vec<String>,
    frames: Vec<FrameDocument>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    base: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<[f64; NUM_JOINTS]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feet: Option<[[f64; 2]; NUM_LEGS]>,
}

const FEET_CONSISTENCY: f64 = 1e-6;

impl MotionClip {
    /// Builds a clip from frames, computing velocities and checking limits.
    pub fn new(name: impl Into<String>, fps: f64, frames: Vec<ClipFrame>, morph: &Morphology) -> Result<Self, ClipError> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(ClipError::Schema(format!("fps must be positive, got {fps}")));
        }
        if frames.len() < 2 {
            return Err(ClipError::Schema(format!("a clip needs at least 2 frames, got {}", frames.len())));
        }
        check_limits(&frames, morph)?;
        let velocities = finite_difference_velocities(&frames, fps);
        Ok(MotionClip { name: name.into(), fps, frames, velocities })
    }

    pub fn from_json_str(text: &str, morph: &Morphology) -> Result<Self, ClipError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ClipError::Parse(e.to_string()))?;
        for key in ["name", "fps", "joints", "frames"] {
            if value.get(key).is_none() {
                return Err(ClipError::Schema(format!("missing key `{key}`")));
            }
        }
        let doc: ClipDocument = serde_json::from_value(value).map_err(|e| ClipError::Schema(e.to_string()))?;
        if doc.joints.len() != NUM_JOINTS || doc.joints.iter().zip(JOINT_NAMES).any(|(a, b)| a != b) {
            return Err(ClipError::Schema(format!("joints must be {JOINT_NAMES:?}, got {:?}", doc.joints)));
        }
        if !(doc.fps > 0.0 && doc.fps.is_finite()) {
            return Err(ClipError::Schema(format!("fps must be positive, got {}", doc.fps)));
        }
        check_timestamps(&doc)?;

        let mut frames = Vec::with_capacity(doc.frames.len());
        for (i, f) in doc.frames.iter().enumerate() {
            let base = BasePose { x: f.base[0], z: f.base[1], pitch: f.base[2], ..BasePose::default() };
            let frame = match (f.q, f.feet) {
                (Some(q), Some(feet)) => {
                    let fk = forward_kinematics(morph, &base, &q);
                    for leg in 0..NUM_LEGS {
                        if (fk[leg] - Vec2::new(feet[leg][0], feet[leg][1])).norm() > FEET_CONSISTENCY {
                            return Err(ClipError::Schema(format!(
                                "frame {i}: foot {leg} disagrees with forward kinematics of q"
                            )));
                        }
                    }
                    ClipFrame { base: f.base, q, feet }
                }
                (Some(q), None) => {
                    let fk = forward_kinematics(morph, &base, &q);
                    ClipFrame { base: f.base, q, feet: fk.map(|p| [p.x, p.y]) }
                }
                (None, Some(feet)) => {
                    let targets = feet.map(|p| Vec2::new(p[0], p[1]));
                    let q = inverse_kinematics(morph, &base, &targets)?;
                    ClipFrame { base: f.base, q, feet }
                }
                (None, None) => return Err(ClipError::Schema(format!("frame {i} carries neither `q` nor `feet`"))),
            };
            frames.push(frame);
        }
        MotionClip::new(doc.name, doc.fps, frames, morph)
    }

    pub fn load(path: impl AsRef<Path>, morph: &Morphology) -> Result<Self, ClipError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClipError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json_str(&text, morph)
    }

    pub fn to_json_string(&self) -> String {
        let doc = ClipDocument {
            name: self.name.clone(),
            fps: self.fps,
            joints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            frames: self.frames.iter().map(|f| FrameDocument { t: None, base: f.base, q: Some(f.q), feet: Some(f.feet) }).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("clip serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json_string())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Clip duration, frame count over frame rate (s).
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    pub fn frame_state(&self, index: usize) -> (BasePose, JointState) {
        let f = &self.frames[index];
        let v = &self.velocities[index];
        let base = BasePose { x: f.base[0], z: f.base[1], pitch: f.base[2], vx: v.base[0], vz: v.base[1], pitch_rate: v.base[2] };
        (base, JointState { q: f.q, qd: v.qd })
    }

    pub fn observation(&self, morph: &Morphology, index: usize) -> AmpObservation {
        let (base, joints) = self.frame_state(index);
        disc_observation(morph, &base, &joints)
    }

    /// Per-frame ground contact, judged by foot height.
    pub fn contacts(&self, tolerance: f64) -> Vec<[bool; NUM_LEGS]> {
        self.frames.iter().map(|f| f.feet.map(|p| p[1] <= tolerance)).collect()
    }
}

fn check_timestamps(doc: &ClipDocument) -> Result<(), ClipError> {
    let stamps: Vec<Option<f64>> = doc.frames.iter().map(|f| f.t).collect();
    if stamps.iter().all(Option::is_none) {
        return Ok(());
    }
    if stamps.iter().any(Option::is_none) {
        return Err(ClipError::Schema("timestamps must be given for all frames or none".into()));
    }
    let period = 1.0 / doc.fps;
    for (i, pair) in stamps.windows(2).enumerate() {
        let dt = pair[1].unwrap() - pair[0].unwrap();
        if dt <= 0.0 {
            return Err(ClipError::Schema(format!("timestamps are not increasing at frame {}", i + 1)));
        }
        if (dt - period).abs() > 1e-6 * period.max(1.0) {
            return Err(ClipError::Schema(format!(
                "non-uniform timestamps at frame {}: step {dt} s, expected {period} s",
                i + 1
            )));
        }
    }
    Ok(())
}

fn check_limits(frames: &[ClipFrame], morph: &Morphology) -> Result<(), ClipError> {
    let (lower, upper) = (morph.joint_lower(), morph.joint_upper());
    for (frame, f) in frames.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            if !(f.q[j] >= lower[j] && f.q[j] <= upper[j]) {
                return Err(ClipError::LimitViolation { frame, joint: JOINT_NAMES[j], value: f.q[j], lower: lower[j], upper: upper[j] });
            }
        }
    }
    Ok(())
}

/// Central differences in the interior, one-sided at both ends. Angles are
/// differenced on the circle.
pub fn finite_difference_velocities(frames: &[ClipFrame], fps: f64) -> Vec<FrameVelocity> {
    let n = frames.len();
    assert!(n >= 2, "finite differences need at least two frames");
    let rate = |a: &ClipFrame, b: &ClipFrame, scale: f64| -> FrameVelocity {
        FrameVelocity {
            base: [
                (b.base[0] - a.base[0]) * scale,
                (b.base[1] - a.base[1]) * scale,
                wrap_angle(b.base[2] - a.base[2]) * scale,
            ],
            qd: std::array::from_fn(|j| wrap_angle(b.q[j] - a.q[j]) * scale),
        }
    };
    (0..n)
        .map(|i| match i {
            0 => rate(&frames[0], &frames[1], fps),
            i if i == n - 1 => rate(&frames[n - 2], &frames[n - 1], fps),
            i => rate(&frames[i - 1], &frames[i + 1], 0.5 * fps),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaitKind {
    Pace,
    Trot,
    Canter,
    TurnInPlace,
}

impl GaitKind {
    pub const ALL: [GaitKind; 4] = [GaitKind::Pace, GaitKind::Trot, GaitKind::Canter, GaitKind::TurnInPlace];

    pub fn name(self) -> &'static str {
        match self {
            GaitKind::Pace => "pace",
            GaitKind::Trot => "trot",
            GaitKind::Canter => "canter",
            GaitKind::TurnInPlace => "turn-in-place",
        }
    }

    pub fn default_speed(self) -> f64 {
        match self {
            GaitKind::Pace => 0.8,
            GaitKind::Trot => 1.2,
            GaitKind::Canter => 1.8,
            GaitKind::TurnInPlace => 0.0,
        }
    }

    fn pattern(self) -> GaitPattern {
        // Phase offsets in leg order FL, FR, RL, RR.
        match self {
            GaitKind::Pace => GaitPattern { period: 0.5, duty: 0.6, offsets: [0.0, 0.5, 0.0, 0.5], swing_height: 0.06 },
            GaitKind::Trot => GaitPattern { period: 0.4, duty: 0.55, offsets: [0.0, 0.5, 0.5, 0.0], swing_height: 0.07 },
            GaitKind::Canter => GaitPattern { period: 0.4, duty: 0.35, offsets: [0.35, 0.45, 0.0, 0.1], swing_height: 0.08 },
            GaitKind::TurnInPlace => GaitPattern { period: 0.5, duty: 0.6, offsets: [0.0, 0.5, 0.5, 0.0], swing_height: 0.05 },
        }
    }

    pub fn period(self) -> f64 {
        self.pattern().period
    }
}

impl std::str::FromStr for GaitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GaitKind::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown gait `{s}` (expected pace, trot, canter or turn-in-place)"))
    }
}

#[derive(Clone, Copy, Debug)]
struct GaitPattern {
    period: f64,
    duty: f64,
    offsets: [f64; NUM_LEGS],
    swing_height: f64,
}

/// Foot position relative to its hip projection: `(dx, height)`.
fn foot_cycle(pattern: &GaitPattern, stride: f64, phase: f64) -> (f64, f64) {
    if phase < pattern.duty {
        let s = phase / pattern.duty;
        (0.5 * stride - stride * s, 0.0)
    } else {
        let s = (phase - pattern.duty) / (1.0 - pattern.duty);
        let x = -0.5 * stride + stride * (s - (2.0 * PI * s).sin() / (2.0 * PI));
        let z = pattern.swing_height * 0.5 * (1.0 - (2.0 * PI * s).cos());
        (x, z)
    }
}

pub const MAX_GAIT_SPEED: f64 = 2.5;

/// Cycloidal foot trajectories with gait-specific phase offsets, retargeted
/// onto the morphology with inverse kinematics.
pub fn generate_procedural_gait(gait: GaitKind, speed: f64, duration: f64, fps: f64, morph: &Morphology) -> Result<MotionClip, ClipError> {
    let pattern = gait.pattern();
    if !(0.0..=MAX_GAIT_SPEED).contains(&speed) {
        return Err(ClipError::InvalidGait(format!("speed {speed} m/s outside [0, {MAX_GAIT_SPEED}]")));
    }
    if !(duration >= pattern.period) {
        return Err(ClipError::InvalidGait(format!(
            "duration {duration} s shorter than one {} cycle ({} s)",
            gait.name(),
            pattern.period
        )));
    }
    if !(fps > 0.0) {
        return Err(ClipError::Schema(format!("fps must be positive, got {fps}")));
    }
    let stride = speed * pattern.duty * pattern.period;
    let height = morph.nominal_height();
    let count = ((duration * fps).round() as usize).max(2);
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let t = i as f64 / fps;
        let base = BasePose { x: speed * t, z: height, ..BasePose::default() };
        let targets: [Vec2; NUM_LEGS] = std::array::from_fn(|leg| {
            let phase = (t / pattern.period + pattern.offsets[leg]).rem_euclid(1.0);
            let (dx, dz) = foot_cycle(&pattern, stride, phase);
            Vec2::new(base.x + morph.hip_offset(leg).x + dx, dz)
        });
        let q = inverse_kinematics(morph, &base, &targets)?;
        frames.push(ClipFrame { base: [base.x, base.z, base.pitch], q, feet: targets.map(|p| [p.x, p.y]) });
    }
    MotionClip::new(format!("{}_{speed:.1}", gait.name()), fps, frames, morph)
}

/// Clips with duration-proportional sampling weights.
#[derive(Clone, Debug)]
pub struct ReferenceDataset {
    pub clips: Vec<MotionClip>,
    pub weights: Vec<f64>,
}

impl ReferenceDataset {
    pub fn new(clips: Vec<MotionClip>) -> Result<Self, ClipError> {
        if clips.is_empty() {
            return Err(ClipError::Schema("reference dataset is empty".into()));
        }
        let total: f64 = clips.iter().map(MotionClip::duration).sum();
        let weights = clips.iter().map(|c| c.duration() / total).collect();
        Ok(ReferenceDataset { clips, weights })
    }

    /// Pace, trot, canter and stepping in place at their default speeds.
    pub fn procedural(morph: &Morphology, clip_duration: f64, fps: f64) -> Result<Self, ClipError> {
        let clips = GaitKind::ALL
            .into_iter()
            .map(|g| generate_procedural_gait(g, g.default_speed(), clip_duration, fps, morph))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(clips)
    }

    pub fn default_for(morph: &Morphology) -> Self {
        Self::procedural(morph, 1.1, 30.0).expect("default gaits are reachable")
    }

    pub fn load_dir(dir: impl AsRef<Path>, morph: &Morphology) -> Result<Self, ClipError> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| ClipError::Io { path: dir.display().to_string(), message: e.to_string() })?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let clips = paths.iter().map(|p| MotionClip::load(p, morph)).collect::<Result<Vec<_>, _>>()?;
        Self::new(clips)
    }

    pub fn total_duration(&self) -> f64 {
        self.clips.iter().map(MotionClip::duration).sum()
    }

    fn sample_clip(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.clips.len() - 1
    }

    /// `(clip, frame)` with the frame uniform over the whole clip.
    pub fn sample_frame(&self, rng: &mut impl Rng) -> (usize, usize) {
        let clip = self.sample_clip(rng);
        (clip, rng.random_range(0..self.clips[clip].len()))
    }

    /// `(clip, frame)` such that `frame + 1` is in the same clip.
    pub fn sample_transition_index(&self, rng: &mut impl Rng) -> (usize, usize) {
        let clip = self.sample_clip(rng);
        (clip, rng.random_range(0..self.clips[clip].len() - 1))
    }

    pub fn sample_transition(&self, morph: &Morphology, rng: &mut impl Rng) -> (AmpObservation, AmpObservation) {
        let (clip, frame) = self.sample_transition_index(rng);
        let c = &self.clips[clip];
        (c.observation(morph, frame), c.observation(morph, frame + 1))
    }
}
