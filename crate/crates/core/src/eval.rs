//! Evaluation harness: velocity-tracking sweeps, gait diagrams and gait
//! classification, sinusoidal command tracking, and report formatting.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::kinematics::{NUM_JOINTS, NUM_LEGS};
use crate::mocap::ReferenceDataset;
use crate::nn::{GaussianPolicy, RunningNorm};
use crate::rewards::{CommandTarget, MIN_COT_SPEED};
use crate::sim::{self, check_termination, EpisodeParams, SimError, SimState};
use crate::trainer::{policy_observation, reference_start};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no periodic contact pattern (autocorrelation peak {0:.3} < 0.3)")]
    NoPeriodicity(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
}

/// Maps a simulator state and command to joint targets.
/// Maps a simulator state and command to joint targets. `rng` is owned by
/// the rollout so stochastic actors stay reproducible.
pub trait Actor: Sync {
    fn act(&self, state: &SimState, cmd: &CommandTarget, rng: &mut ChaCha8Rng) -> [f64; NUM_JOINTS];
}

/// A trained policy. Acts with the Gaussian mean unless `stochastic` is set.
#[derive(Clone, Debug)]
pub struct PolicyActor {
    pub policy: GaussianPolicy,
    pub obs_norm: RunningNorm,
    pub config: TrainConfig,
    pub stochastic: bool,
}

impl PolicyActor {
    pub fn from_checkpoint(ckpt: &Checkpoint, stochastic: bool) -> Self {
        let mut obs_norm = ckpt.obs_norm.clone();
        obs_norm.frozen = true;
        PolicyActor { policy: ckpt.policy.clone(), obs_norm, config: ckpt.config.clone(), stochastic }
    }
}

impl Actor for PolicyActor {
    fn act(&self, state: &SimState, cmd: &CommandTarget, rng: &mut ChaCha8Rng) -> [f64; NUM_JOINTS] {
        let obs = self.obs_norm.normalize_row(&policy_observation(state, cmd));
        let view = ndarray::ArrayView2::from_shape((1, obs.len()), &obs).expect("one row");
        let mean = self.policy.means(view).expect("observation width matches policy");
        let mean = mean.row(0).to_vec();
        let action = if self.stochastic { self.policy.sample(&mean, rng).0 } else { mean };
        self.config.joint_targets(&std::array::from_fn(|j| action[j]))
    }
}

/// Holds a fixed joint configuration.
#[derive(Clone, Copy, Debug)]
pub struct FixedPose(pub [f64; NUM_JOINTS]);

impl Actor for FixedPose {
    fn act(&self, _: &SimState, _: &CommandTarget, _: &mut ChaCha8Rng) -> [f64; NUM_JOINTS] {
        self.0
    }
}

/// Per-step record of one evaluation rollout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutTrace {
    pub time: Vec<f64>,
    pub commands: Vec<CommandTarget>,
    pub forward_speed: Vec<f64>,
    pub contacts: Vec<[bool; NUM_LEGS]>,
    pub positive_work: Vec<f64>,
    pub joint_speed: Vec<f64>,
    pub terminated: bool,
}

impl RolloutTrace {
    pub fn mean_speed(&self) -> f64 {
        mean(&self.forward_speed)
    }

    /// Mean of `|qd|` over joints and steps.
    pub fn mean_joint_speed(&self) -> f64 {
        mean(&self.joint_speed)
    }

    /// Total positive work over weight times distance.
    pub fn cost_of_transport(&self, weight: f64, dt: f64) -> Option<f64> {
        let mean_abs = self.forward_speed.iter().map(|v| v.abs()).sum::<f64>() / self.forward_speed.len().max(1) as f64;
        if !(mean_abs >= MIN_COT_SPEED) {
            return None;
        }
        let distance: f64 = self.forward_speed.iter().map(|v| v.abs() * dt).sum();
        Some(self.positive_work.iter().sum::<f64>() / (weight * distance))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

/// Runs `actor` from `start` for `duration` seconds or until termination.
pub fn run_rollout(
    actor: &dyn Actor,
    config: &TrainConfig,
    params: &EpisodeParams,
    start: SimState,
    duration: f64,
    rng: &mut ChaCha8Rng,
    command: impl Fn(f64) -> CommandTarget,
) -> Result<RolloutTrace, SimError> {
    let dt = config.sim.policy_dt();
    let steps = (duration / dt).round() as usize;
    let mut state = start;
    let mut trace = RolloutTrace::default();
    for k in 0..steps {
        let t = k as f64 * dt;
        let cmd = command(t);
        let action = actor.act(&state, &cmd, rng);
        let next = sim::step(&config.morphology, &config.sim, params, &state, &action)?;
        trace.time.push(t + dt);
        trace.commands.push(cmd);
        trace.forward_speed.push(next.base.vx);
        trace.contacts.push(next.contacts);
        trace.positive_work.push(next.energy - state.energy);
        trace.joint_speed.push(next.joints.qd.iter().map(|w| w.abs()).sum::<f64>() / NUM_JOINTS as f64);
        state = next;
        if check_termination(&state, &config.sim) {
            trace.terminated = true;
            break;
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingRow {
    pub command: f64,
    pub mean_speed: f64,
    pub std_speed: f64,
    pub mean_cot: f64,
    pub std_cot: f64,
    pub mean_joint_speed: f64,
    pub falls: usize,
    /// Some rollout barely moved, so its cost of transport is undefined.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingReport {
    pub rows: Vec<TrackingRow>,
    pub rollouts: usize,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub rollouts: usize,
    pub duration: f64,
    pub seed: u64,
    pub randomize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { rollouts: 5, duration: 10.0, seed: 0, randomize: false }
    }
}

pub const TABLE_SPEEDS: [f64; 4] = [0.4, 0.8, 1.2, 1.6];

fn rollout_seed(seed: u64, speed_index: usize, rollout: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((speed_index as u64) << 32 | rollout as u64)
}

/// Starts `opts.rollouts` reference-initialized rollouts per commanded speed.
pub fn evaluate_tracking(
    actor: &dyn Actor,
    config: &TrainConfig,
    dataset: &ReferenceDataset,
    speeds: &[f64],
    opts: &EvalOptions,
) -> Result<TrackingReport, EvalError> {
    if opts.rollouts == 0 || !(opts.duration > 0.0) {
        return Err(EvalError::Invalid("need at least one rollout of positive duration".into()));
    }
    let weight = config.morphology.weight();
    let dt = config.sim.policy_dt();
    let rows = speeds
        .par_iter()
        .enumerate()
        .map(|(si, &speed)| {
            let traces = (0..opts.rollouts)
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(opts.seed, si, r));
                    let start = reference_start(&config.morphology, &config.sim, dataset, &mut rng);
                    let params = if opts.randomize {
                        sim::randomize_episode(&config.sim, &mut rng)
                    } else {
                        EpisodeParams::nominal(&config.sim)
                    };
                    run_rollout(actor, config, &params, start, opts.duration, &mut rng, |_| CommandTarget::forward(speed))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let speeds: Vec<f64> = traces.iter().map(RolloutTrace::mean_speed).collect();
            let cots: Vec<Option<f64>> = traces.iter().map(|t| t.cost_of_transport(weight, dt)).collect();
            let valid: Vec<f64> = cots.iter().flatten().copied().collect();
            Ok(TrackingRow {
                command: speed,
                mean_speed: mean(&speeds),
                std_speed: std_dev(&speeds),
                mean_cot: if valid.is_empty() { f64::NAN } else { mean(&valid) },
                std_cot: if valid.is_empty() { f64::NAN } else { std_dev(&valid) },
                mean_joint_speed: mean(&traces.iter().map(RolloutTrace::mean_joint_speed).collect::<Vec<_>>()),
                falls: traces.iter().filter(|t| t.terminated).count(),
                flagged: valid.len() < cots.len(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(TrackingReport { rows, rollouts: opts.rollouts, duration: opts.duration })
}

impl TrackingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("command,mean_speed,std_speed,mean_cot,std_cot,mean_joint_speed,falls,flagged\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.command, r.mean_speed, r.std_speed, r.mean_cot, r.std_cot, r.mean_joint_speed, r.falls, r.flagged as u8
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("velocity tracking over {} rollouts x {:.1} s\n", self.rollouts, self.duration);
        s.push_str(" command |  measured speed  |   cost of transport   | falls\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                " {:>6.2}  | {:>6.3} +- {:<5.3} | {:>8.3} +- {:<8.3} | {}{}",
                r.command,
                r.mean_speed,
                r.std_speed,
                r.mean_cot,
                r.std_cot,
                r.falls,
                if r.flagged { "  (flagged: not moving)" } else { "" }
            );
        }
        s
    }
}

/// Contact timing extracted from per-step contact flags.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitDiagram {
    /// Per foot, `(touchdown, liftoff)` times in seconds.
    pub intervals: [Vec<(f64, f64)>; NUM_LEGS],
    pub cycle: f64,
    /// Phase of each foot relative to the front-left foot, in cycles.
    pub phases: [f64; NUM_LEGS],
    /// Fraction of time with no foot on the ground.
    pub flight_fraction: f64,
    pub dt: f64,
}

pub const MIN_DWELL: usize = 2;
pub const MIN_PERIODICITY: f64 = 0.3;

/// Removes runs shorter than `min_dwell` steps by merging them into their
/// neighbours. Runs touching either end are kept.
pub fn debounce(signal: &[bool], min_dwell: usize) -> Vec<bool> {
    let mut out = signal.to_vec();
    loop {
        let runs = runs(&out);
        let short = runs
            .iter()
            .enumerate()
            .filter(|(k, r)| *k > 0 && *k + 1 < runs.len() && r.2 - r.1 < min_dwell)
            .min_by_key(|(_, r)| r.2 - r.1);
        match short {
            Some((_, &(value, start, end))) => out[start..end].iter_mut().for_each(|v| *v = !value),
            None => return out,
        }
    }
}

/// `(value, start, end)` of each maximal constant run.
fn runs(signal: &[bool]) -> Vec<(bool, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=signal.len() {
        if i == signal.len() || signal[i] != signal[start] {
            out.push((signal[start], start, i));
            start = i;
        }
    }
    out
}

fn centered(signal: &[bool]) -> Vec<f64> {
    let x: Vec<f64> = signal.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let m = mean(&x);
    x.iter().map(|v| v - m).collect()
}

fn correlation(a: &[f64], b: &[f64], lag: usize) -> f64 {
    let n = a.len() - lag;
    let num: f64 = (0..n).map(|i| a[i] * b[i + lag]).sum::<f64>() / n as f64;
    let da = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
    let db = (b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64).sqrt();
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db)
    }
}

/// Correlation of `a[i]` with `b[i + lag]` for lags of either sign.
fn signed_correlation(a: &[f64], b: &[f64], lag: isize) -> f64 {
    if lag >= 0 {
        correlation(a, b, lag as usize)
    } else {
        correlation(b, a, lag.unsigned_abs())
    }
}

/// Period (in steps) and peak height of the autocorrelation. The first lag
/// that comes within 10% of the highest peak wins, so harmonics are skipped.
fn period_of(x: &[f64]) -> (usize, f64) {
    let max_lag = x.len() / 2;
    let corr: Vec<f64> = (0..=max_lag).map(|lag| correlation(x, x, lag)).collect();
    let Some(first_negative) = corr.iter().position(|&c| c < 0.0) else { return (0, 0.0) };
    let peak = corr[first_negative..].iter().copied().fold(0.0, f64::max);
    let lag = (first_negative..=max_lag)
        .find(|&l| corr[l] >= 0.9 * peak && (l == max_lag || corr[l] >= corr[l + 1]))
        .unwrap_or(0);
    (lag, corr[lag])
}

pub fn gait_diagram(contacts: &[[bool; NUM_LEGS]], dt: f64) -> Result<GaitDiagram, EvalError> {
    if contacts.len() < 4 {
        return Err(EvalError::TooShort { needed: 4, got: contacts.len() });
    }
    let feet: [Vec<bool>; NUM_LEGS] = std::array::from_fn(|l| debounce(&contacts.iter().map(|c| c[l]).collect::<Vec<_>>(), MIN_DWELL));
    let intervals = feet.clone().map(|s| {
        runs(&s).into_iter().filter(|r| r.0).map(|(_, a, b)| (a as f64 * dt, b as f64 * dt)).collect::<Vec<_>>()
    });
    let n = contacts.len();
    let flight = (0..n).filter(|&i| feet.iter().all(|f| !f[i])).count();

    let signals = feet.clone().map(|f| centered(&f));
    let (period, peak) = signals.iter().map(|s| period_of(s)).fold((0, 0.0), |best, p| if p.1 > best.1 { p } else { best });
    if peak < MIN_PERIODICITY {
        return Err(EvalError::NoPeriodicity(peak));
    }
    // Lag of each foot behind the reference foot, refined to sub-step precision.
    let half = (period / 2) as isize;
    let phases = std::array::from_fn(|l| {
        let score = |lag: isize| signed_correlation(&signals[0], &signals[l], lag);
        let best = (-half..period as isize - half).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap_or(0);
        let (prev, mid, next) = (score(best - 1), score(best), score(best + 1));
        let denom = prev - 2.0 * mid + next;
        let shift = if denom.abs() > 1e-12 { 0.5 * (prev - next) / denom } else { 0.0 };
        ((best as f64 + shift) / period as f64).rem_euclid(1.0)
    });
    Ok(GaitDiagram { intervals, cycle: period as f64 * dt, phases, flight_fraction: flight as f64 / n as f64, dt })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaitClass {
    Pace,
    Trot,
    Canter,
    Unknown,
}

impl GaitClass {
    pub fn name(self) -> &'static str {
        match self {
            GaitClass::Pace => "pace",
            GaitClass::Trot => "trot",
            GaitClass::Canter => "canter",
            GaitClass::Unknown => "unknown",
        }
    }
}

/// Circular distance between two phases, in `[0, 0.5]`.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

pub const PHASE_TOLERANCE: f64 = 0.15;
pub const MIN_FLIGHT_FRACTION: f64 = 0.05;

pub fn classify_gait(diagram: &GaitDiagram) -> GaitClass {
    let p = &diagram.phases;
    let (fl, fr, rl, rr) = (p[0], p[1], p[2], p[3]);
    let near = |a: f64, b: f64| phase_distance(a, b) < PHASE_TOLERANCE;
    let opposite = |a: f64, b: f64| (phase_distance(a, b) - 0.5).abs() < PHASE_TOLERANCE;
    if near(fl, rl) && near(fr, rr) && opposite(fl, fr) {
        GaitClass::Pace
    } else if near(fl, rr) && near(fr, rl) && opposite(fl, rl) {
        GaitClass::Trot
    } else if diagram.flight_fraction > MIN_FLIGHT_FRACTION
        && phase_distance(fl, fr) < 0.25
        && phase_distance(rl, rr) < 0.25
        && phase_distance(fl, rl).min(phase_distance(fr, rr)) > PHASE_TOLERANCE
    {
        GaitClass::Canter
    } else {
        GaitClass::Unknown
    }
}

impl GaitDiagram {
    /// Contact bars per foot over the recorded window.
    pub fn to_svg(&self, duration: f64) -> String {
        let (width, row, left) = (800.0, 30.0, 40.0);
        let scale = (width - left - 10.0) / duration.max(self.dt);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"monospace\" font-size=\"12\">\n",
            row * NUM_LEGS as f64 + 30.0
        );
        for (l, name) in crate::kinematics::LEG_NAMES.iter().enumerate() {
            let y = 10.0 + l as f64 * row;
            let _ = writeln!(s, "  <text x=\"4\" y=\"{}\">{name}</text>", y + row * 0.6);
            for (a, b) in &self.intervals[l] {
                let _ = writeln!(
                    s,
                    "  <rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"black\"/>",
                    left + a * scale,
                    (b - a) * scale,
                    row * 0.7
                );
            }
        }
        let _ = writeln!(
            s,
            "  <text x=\"{left}\" y=\"{}\">cycle {:.3} s, flight {:.0}%</text>",
            row * NUM_LEGS as f64 + 25.0,
            self.cycle,
            100.0 * self.flight_fraction
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("cycle {:.3} s, flight fraction {:.3}\n", self.cycle, self.flight_fraction);
        for (l, name) in crate::kinematics::LEG_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{name}: phase {:.3}, {} stance intervals", self.phases[l], self.intervals[l].len());
        }
        s
    }
}

/// Aligned command and measurement series.
#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidTrace {
    pub time: Vec<f64>,
    pub cmd_vx: Vec<f64>,
    pub meas_vx: Vec<f64>,
    pub cmd_yaw: Vec<f64>,
    pub meas_yaw: Vec<f64>,
    pub rms_linear: f64,
    pub rms_angular: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidSpec {
    pub mean_vx: f64,
    pub amplitude_vx: f64,
    pub amplitude_yaw: f64,
    pub period: f64,
    pub duration: f64,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        SinusoidSpec { mean_vx: 0.8, amplitude_vx: 0.4, amplitude_yaw: 0.0, period: 5.0, duration: 10.0 }
    }
}

impl SinusoidSpec {
    pub fn command(&self, t: f64) -> CommandTarget {
        let s = (2.0 * PI * t / self.period).sin();
        CommandTarget { vx: self.mean_vx + self.amplitude_vx * s, vy: 0.0, yaw_rate: self.amplitude_yaw * s }
    }
}

/// Builds the series from any plant that reports `(vx, yaw_rate)` for a command.
pub fn sinusoid_series(spec: &SinusoidSpec, rate: f64, mut plant: impl FnMut(f64, &CommandTarget) -> Option<(f64, f64)>) -> SinusoidTrace {
    let steps = (spec.duration * rate).round() as usize;
    let mut tr = SinusoidTrace { time: vec![], cmd_vx: vec![], meas_vx: vec![], cmd_yaw: vec![], meas_yaw: vec![], rms_linear: 0.0, rms_angular: 0.0 };
    for k in 0..steps {
        let t = k as f64 / rate;
        let cmd = spec.command(t);
        let Some((vx, yaw)) = plant(t, &cmd) else { break };
        tr.time.push(t);
        tr.cmd_vx.push(cmd.vx);
        tr.meas_vx.push(vx);
        tr.cmd_yaw.push(cmd.yaw_rate);
        tr.meas_yaw.push(yaw);
    }
    let rms = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64).sqrt();
    tr.rms_linear = rms(&tr.cmd_vx, &tr.meas_vx);
    tr.rms_angular = rms(&tr.cmd_yaw, &tr.meas_yaw);
    tr
}

/// Tracks the sinusoid in the simulator; the series stops early on a fall.
pub fn evaluate_sinusoid(
    actor: &dyn Actor,
    config: &TrainConfig,
    start: SimState,
    spec: &SinusoidSpec,
    seed: u64,
) -> Result<SinusoidTrace, EvalError> {
    let params = EpisodeParams::nominal(&config.sim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = start;
    let mut error = None;
    let trace = sinusoid_series(spec, config.sim.policy_hz as f64, |_, cmd| {
        if check_termination(&state, &config.sim) {
            return None;
        }
        let action = actor.act(&state, cmd, &mut rng);
        match sim::step(&config.morphology, &config.sim, &params, &state, &action) {
            Ok(next) => {
                state = next;
                Some((state.base.vx, 0.0))
            }
            Err(e) => {
                error = Some(e);
                None
            }
        }
    });
    match error {
        Some(e) => Err(e.into()),
        None => Ok(trace),
    }
}

impl SinusoidTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,cmd_vx,meas_vx,cmd_yaw,meas_yaw\n");
        for i in 0..self.time.len() {
            let _ = writeln!(s, "{},{},{},{},{}", self.time[i], self.cmd_vx[i], self.meas_vx[i], self.cmd_yaw[i], self.meas_yaw[i]);
        }
        s
    }
}
