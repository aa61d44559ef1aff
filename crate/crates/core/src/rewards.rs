//! Task, composite and hand-designed style rewards, command sampling and the
//! mechanical cost of transport.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{Morphology, NUM_JOINTS, NUM_LEGS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandTarget {
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl CommandTarget {
    pub fn forward(vx: f64) -> Self {
        CommandTarget { vx, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandRanges {
    pub vx: [f64; 2],
    pub vy: [f64; 2],
    pub yaw_rate: [f64; 2],
    /// Seconds between command resamples within an episode.
    pub resample_interval: [f64; 2],
    /// Pins the lateral command to zero for the sagittal simulator.
    pub planar: bool,
}

impl Default for CommandRanges {
    fn default() -> Self {
        CommandRanges {
            vx: [-1.0, 2.0],
            vy: [-0.3, 0.3],
            yaw_rate: [-1.57, 1.57],
            resample_interval: [3.0, 6.0],
            planar: true,
        }
    }
}

fn uniform(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

pub fn sample_command(ranges: &CommandRanges, rng: &mut impl Rng) -> CommandTarget {
    let vx = uniform(ranges.vx, rng);
    let vy = uniform(ranges.vy, rng);
    let yaw_rate = uniform(ranges.yaw_rate, rng);
    CommandTarget { vx, vy: if ranges.planar { 0.0 } else { vy }, yaw_rate }
}

pub fn sample_resample_delay(ranges: &CommandRanges, rng: &mut impl Rng) -> f64 {
    uniform(ranges.resample_interval, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Amp,
    Complex,
    None,
}

impl std::str::FromStr for RewardMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "amp" => Ok(RewardMode::Amp),
            "complex" => Ok(RewardMode::Complex),
            "none" => Ok(RewardMode::None),
            _ => Err(format!("unknown reward mode `{s}` (expected amp, complex or none)")),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardMode::Amp => "amp",
            RewardMode::Complex => "complex",
            RewardMode::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub linear_velocity: f64,
    pub angular_velocity: f64,
    pub task: f64,
    pub style: f64,
    pub complex: ComplexScales,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { linear_velocity: 1.0, angular_velocity: 0.5, task: 0.35, style: 0.65, complex: ComplexScales::default() }
    }
}

/// `w_v exp(-|v_cmd - v|) + w_w exp(-|w_cmd - w|)` over the horizontal
/// velocity and the yaw rate.
pub fn task_reward(v_meas: [f64; 2], yaw_meas: f64, cmd: &CommandTarget, w_v: f64, w_omega: f64) -> f64 {
    let ev = (cmd.vx - v_meas[0]).hypot(cmd.vy - v_meas[1]);
    let ew = (cmd.yaw_rate - yaw_meas).abs();
    w_v * (-ev).exp() + w_omega * (-ew).exp()
}

pub fn composite_reward(task: f64, style: f64, weights: &RewardWeights) -> f64 {
    weights.task * task + weights.style * style
}

pub const NUM_COMPLEX_TERMS: usize = 15;

pub const COMPLEX_TERM_NAMES: [&str; NUM_COMPLEX_TERMS] = [
    "lin_vel_z",
    "ang_vel_xy",
    "orientation",
    "torques",
    "dof_acc",
    "action_rate",
    "collision",
    "termination",
    "dof_pos_lower",
    "dof_pos_upper",
    "torque_limits",
    "tracking_lin_vel",
    "tracking_ang_vel",
    "feet_air_time",
    "feet_contact_forces",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComplexScales(pub [f64; NUM_COMPLEX_TERMS]);

impl Default for ComplexScales {
    fn default() -> Self {
        ComplexScales([-2.0, -0.05, -0.01, -1e-5, -2.5e-7, -0.01, -1.0, -0.5, -10.0, -10.0, -0.0002, 1.0, 0.5, 1.0, -1.0])
    }
}

/// Everything the hand-designed reward looks at for one policy step.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexInputs {
    /// Base linear velocity expressed in the base frame (forward, up).
    pub base_velocity: [f64; 2],
    pub pitch: f64,
    pub pitch_rate: f64,
    pub q: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
    pub prev_qd: [f64; NUM_JOINTS],
    pub torques: [f64; NUM_JOINTS],
    pub action: [f64; NUM_JOINTS],
    pub prev_action: [f64; NUM_JOINTS],
    pub collisions: usize,
    pub terminated: bool,
    /// World-frame horizontal velocity and yaw rate.
    pub v_meas: [f64; 2],
    pub yaw_meas: f64,
    pub cmd: CommandTarget,
    pub contacts: [bool; NUM_LEGS],
    pub swing_times: [f64; NUM_LEGS],
    pub foot_forces: [f64; NUM_LEGS],
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexReward {
    pub total: f64,
    /// Unscaled term values in [`COMPLEX_TERM_NAMES`] order.
    pub terms: [f64; NUM_COMPLEX_TERMS],
    pub scaled: [f64; NUM_COMPLEX_TERMS],
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

pub fn complex_style_reward(input: &ComplexInputs, morph: &Morphology, scales: &ComplexScales) -> ComplexReward {
    let lower = morph.joint_lower();
    let upper = morph.joint_upper();
    let f_max = 1.5 * morph.weight();
    let mut t = [0.0; NUM_COMPLEX_TERMS];
    t[0] = input.base_velocity[1].powi(2);
    t[1] = input.pitch_rate.abs();
    t[2] = input.pitch.sin().abs();
    t[3] = norm(input.torques.iter().copied());
    t[4] = norm((0..NUM_JOINTS).map(|j| (input.qd[j] - input.prev_qd[j]) / input.dt));
    t[5] = norm((0..NUM_JOINTS).map(|j| input.action[j] - input.prev_action[j]));
    t[6] = input.collisions as f64;
    t[7] = if input.terminated { 1.0 } else { 0.0 };
    t[8] = (0..NUM_JOINTS).map(|j| (lower[j] - input.q[j]).max(0.0)).sum();
    t[9] = (0..NUM_JOINTS).map(|j| (input.q[j] - upper[j]).max(0.0)).sum();
    t[10] = input.torques.iter().map(|tau| (tau.abs() - morph.torque_limit).max(0.0)).sum();
    t[11] = (-(input.cmd.vx - input.v_meas[0]).hypot(input.cmd.vy - input.v_meas[1])).exp();
    t[12] = (-(input.cmd.yaw_rate - input.yaw_meas).abs()).exp();
    t[13] = (0..NUM_LEGS).filter(|&l| !input.contacts[l]).map(|l| input.swing_times[l]).sum();
    t[14] = norm(input.foot_forces.iter().map(|f| (f - f_max).max(0.0)));

    let scaled: [f64; NUM_COMPLEX_TERMS] = std::array::from_fn(|i| scales.0[i] * t[i]);
    ComplexReward { total: scaled.iter().sum(), terms: t, scaled }
}

/// Time since liftoff for each foot, zeroed at touchdown.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SwingTimers(pub [f64; NUM_LEGS]);

impl SwingTimers {
    pub fn update(&mut self, contacts: &[bool; NUM_LEGS], dt: f64) {
        for (t, &c) in self.0.iter_mut().zip(contacts) {
            *t = if c { 0.0 } else { *t + dt };
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CotError {
    #[error("mean speed {0:.4} m/s is too small for a cost of transport")]
    ZeroVelocity(f64),
    #[error("history lengths differ")]
    LengthMismatch,
}

pub const MIN_COT_SPEED: f64 = 0.05;

/// Rectified actuator power `sum_j max(tau_j qd_j, 0)`.
pub fn positive_power(torques: &[f64], qd: &[f64]) -> f64 {
    torques.iter().zip(qd).map(|(t, w)| (t * w).max(0.0)).sum()
}

/// `None` when the body is not moving.
pub fn instantaneous_cot(torques: &[f64], qd: &[f64], weight: f64, speed: f64) -> Option<f64> {
    (speed.abs() > 0.0).then(|| positive_power(torques, qd) / (weight * speed.abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CotReport {
    pub instantaneous: Vec<Option<f64>>,
    /// Total positive work over weight times distance travelled.
    pub mean: f64,
}

/// Cost of transport over equally spaced samples.
pub fn cost_of_transport(torques: &[[f64; NUM_JOINTS]], qd: &[[f64; NUM_JOINTS]], speeds: &[f64], weight: f64) -> Result<CotReport, CotError> {
    if torques.len() != qd.len() || qd.len() != speeds.len() {
        return Err(CotError::LengthMismatch);
    }
    let n = speeds.len().max(1) as f64;
    let mean_speed = speeds.iter().map(|v| v.abs()).sum::<f64>() / n;
    if !(mean_speed >= MIN_COT_SPEED) {
        return Err(CotError::ZeroVelocity(mean_speed));
    }
    let work: f64 = torques.iter().zip(qd).map(|(t, w)| positive_power(t, w)).sum();
    let instantaneous = torques.iter().zip(qd).zip(speeds).map(|((t, w), &v)| instantaneous_cot(t, w, weight, v)).collect();
    Ok(CotReport { instantaneous, mean: work / (weight * mean_speed * n) })
}
