//! Planar articulated-body simulator.
//!
//! The robot has eleven generalized coordinates: base `x`, `z`, pitch and the
//! eight joint angles. The equations of motion `M(q) qdd = tau + J_c^T f_c - h`
//! are assembled per body from point Jacobians and solved with a dense
//! Cholesky factorization. Ground contact is a spring-damper penalty on each
//! foot with a stick-slip tangential spring clamped by Coulomb friction.
//!
//! Integration is velocity Verlet (kick, drift, kick) with forces re-evaluated
//! after the drift, which is exact for constant accelerations.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    inverse_base_frame, leg_points, perp, BasePose, JointState, Morphology, Vec2, NUM_JOINTS, NUM_LEGS,
};

pub const DOF: usize = 3 + NUM_JOINTS;

type GenVec = SVector<f64, DOF>;
type GenMat = SMatrix<f64, DOF, DOF>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("numerical divergence at t = {time:.4} s ({detail})")]
    NumericalDivergence { time: f64, detail: String },
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
}

/// Uniform ranges sampled per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationRanges {
    pub friction: [f64; 2],
    pub added_base_mass: [f64; 2],
    pub motor_gain: [f64; 2],
    pub velocity_perturbation: [f64; 2],
    pub perturbation_interval: [f64; 2],
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        RandomizationRanges {
            friction: [0.35, 1.65],
            added_base_mass: [-1.0, 1.0],
            motor_gain: [0.85, 1.15],
            velocity_perturbation: [-1.3, 1.3],
            perturbation_interval: [2.0, 6.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub physics_hz: u32,
    pub policy_hz: u32,
    pub gravity: f64,
    /// Friction coefficient used when randomization is off.
    pub friction: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    pub kp: f64,
    pub kd: f64,
    pub randomization: RandomizationRanges,
    pub min_base_height: f64,
    pub max_pitch: f64,
    /// A foot counts as touching the ground at or below this height (m).
    pub contact_tolerance: f64,
    /// Any generalized coordinate or velocity beyond this magnitude aborts the step.
    pub divergence_bound: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            physics_hz: 1200,
            policy_hz: 30,
            gravity: 9.81,
            friction: 1.0,
            contact_stiffness: 4.0e4,
            contact_damping: 150.0,
            tangential_stiffness: 2.0e4,
            tangential_damping: 60.0,
            kp: 60.0,
            kd: 1.5,
            randomization: RandomizationRanges::default(),
            min_base_height: 0.15,
            max_pitch: 1.0,
            contact_tolerance: 1e-3,
            divergence_bound: 1e3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.policy_hz == 0 || self.physics_hz == 0 || self.physics_hz % self.policy_hz != 0 {
            return Err(SimError::InvalidConfig(format!(
                "policy rate {} Hz must divide physics rate {} Hz",
                self.policy_hz, self.physics_hz
            )));
        }
        let r = &self.randomization;
        for (name, [lo, hi]) in [
            ("friction", r.friction),
            ("added_base_mass", r.added_base_mass),
            ("motor_gain", r.motor_gain),
            ("velocity_perturbation", r.velocity_perturbation),
            ("perturbation_interval", r.perturbation_interval),
        ] {
            if !(lo <= hi) {
                return Err(SimError::InvalidConfig(format!("randomization.{name}: {lo} > {hi}")));
            }
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.physics_hz / self.policy_hz) as usize
    }

    pub fn physics_dt(&self) -> f64 {
        1.0 / self.physics_hz as f64
    }

    pub fn policy_dt(&self) -> f64 {
        1.0 / self.policy_hz as f64
    }
}

/// Per-episode physical parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub friction: f64,
    pub added_base_mass: f64,
    pub motor_gain: f64,
    pub next_perturbation: f64,
}

impl EpisodeParams {
    /// Unrandomized parameters; perturbations never fire.
    pub fn nominal(config: &SimConfig) -> Self {
        EpisodeParams { friction: config.friction, added_base_mass: 0.0, motor_gain: 1.0, next_perturbation: f64::INFINITY }
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn randomize_episode(config: &SimConfig, rng: &mut impl Rng) -> EpisodeParams {
    let r = &config.randomization;
    EpisodeParams {
        friction: uniform(rng, r.friction),
        added_base_mass: uniform(rng, r.added_base_mass),
        motor_gain: uniform(rng, r.motor_gain),
        next_perturbation: uniform(rng, r.perturbation_interval),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub base: BasePose,
    pub joints: JointState,
    pub contacts: [bool; NUM_LEGS],
    /// Normal ground force on each foot at the last substep (N).
    pub foot_forces: [f64; NUM_LEGS],
    pub torques: [f64; NUM_JOINTS],
    pub prev_action: [f64; NUM_JOINTS],
    pub time: f64,
    /// Positive mechanical work done by the actuators so far (J).
    pub energy: f64,
    /// Non-foot bodies (base, thighs) touching the ground.
    pub collisions: usize,
    anchors: [Option<f64>; NUM_LEGS],
}

impl SimState {
    pub fn from_pose(morph: &Morphology, config: &SimConfig, base: BasePose, joints: JointState) -> Self {
        let mut state = SimState {
            base,
            joints,
            contacts: [false; NUM_LEGS],
            foot_forces: [0.0; NUM_LEGS],
            torques: [0.0; NUM_JOINTS],
            prev_action: joints.q,
            time: 0.0,
            energy: 0.0,
            collisions: 0,
            anchors: [None; NUM_LEGS],
        };
        state.refresh_contacts(morph, config);
        state
    }

    fn refresh_contacts(&mut self, morph: &Morphology, config: &SimConfig) {
        for leg in 0..NUM_LEGS {
            let points = leg_points(morph, &self.base, &self.joints.q, leg);
            self.contacts[leg] = points.foot.y <= config.contact_tolerance;
        }
        self.collisions = count_collisions(morph, &self.base, &self.joints.q);
    }

    /// Foot heights above the ground (m).
    pub fn foot_heights(&self, morph: &Morphology) -> [f64; NUM_LEGS] {
        std::array::from_fn(|leg| leg_points(morph, &self.base, &self.joints.q, leg).foot.y)
    }

    fn generalized(&self) -> (GenVec, GenVec) {
        let mut pos = GenVec::zeros();
        let mut vel = GenVec::zeros();
        pos[0] = self.base.x;
        pos[1] = self.base.z;
        pos[2] = self.base.pitch;
        vel[0] = self.base.vx;
        vel[1] = self.base.vz;
        vel[2] = self.base.pitch_rate;
        for j in 0..NUM_JOINTS {
            pos[3 + j] = self.joints.q[j];
            vel[3 + j] = self.joints.qd[j];
        }
        (pos, vel)
    }

    fn set_generalized(&mut self, pos: &GenVec, vel: &GenVec) {
        self.base = BasePose { x: pos[0], z: pos[1], pitch: pos[2], vx: vel[0], vz: vel[1], pitch_rate: vel[2] };
        for j in 0..NUM_JOINTS {
            self.joints.q[j] = pos[3 + j];
            self.joints.qd[j] = vel[3 + j];
        }
    }
}

/// Copies a reference frame into a fresh simulator state.
pub fn reset_from_reference(morph: &Morphology, config: &SimConfig, base: &BasePose, joints: &JointState) -> SimState {
    SimState::from_pose(morph, config, *base, *joints)
}

pub fn pd_torque(
    q: &[f64; NUM_JOINTS],
    qd: &[f64; NUM_JOINTS],
    target: &[f64; NUM_JOINTS],
    kp: f64,
    kd: f64,
    gain_multiplier: f64,
    torque_limit: f64,
) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|j| {
        let raw = gain_multiplier * (kp * (target[j] - q[j]) - kd * qd[j]);
        raw.clamp(-torque_limit, torque_limit)
    })
}

pub fn check_termination(state: &SimState, config: &SimConfig) -> bool {
    state.base.z < config.min_base_height || state.base.pitch.abs() > config.max_pitch || state.collisions > 0
}

/// Adds a uniform horizontal velocity kick and schedules the next one.
///
/// The draw is a horizontal `(x, y)` pair; the lateral component has no
/// counterpart in the sagittal plane and is discarded.
pub fn perturb_velocity(
    state: &SimState,
    params: &mut EpisodeParams,
    config: &SimConfig,
    rng: &mut impl Rng,
) -> SimState {
    let range = config.randomization.velocity_perturbation;
    let kick = [uniform(rng, range), uniform(rng, range)];
    params.next_perturbation = state.time + uniform(rng, config.randomization.perturbation_interval);
    apply_velocity_kick(state, kick)
}

pub fn apply_velocity_kick(state: &SimState, kick: [f64; 2]) -> SimState {
    let mut next = state.clone();
    next.base.vx += kick[0];
    next
}

/// Per-substep actuator sample, for energy and cost-of-transport accounting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubstepSample {
    pub torques: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
    pub base_velocity: [f64; 2],
    pub dt: f64,
}

pub fn step(
    morph: &Morphology,
    config: &SimConfig,
    params: &EpisodeParams,
    state: &SimState,
    action: &[f64; NUM_JOINTS],
) -> Result<SimState, SimError> {
    step_traced(morph, config, params, state, action, None)
}

/// Advances one policy period, optionally recording every substep.
pub fn step_traced(
    morph: &Morphology,
    config: &SimConfig,
    params: &EpisodeParams,
    state: &SimState,
    action: &[f64; NUM_JOINTS],
    mut trace: Option<&mut Vec<SubstepSample>>,
) -> Result<SimState, SimError> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(SimError::NumericalDivergence { time: state.time, detail: "non-finite action".into() });
    }
    let dt = config.physics_dt();
    let mut next = state.clone();
    let (mut pos, mut vel) = next.generalized();
    let model = Model::new(morph, config, params);

    for _ in 0..config.substeps() {
        let start = model.evaluate(&pos, &vel, action, &next.anchors);
        let power: f64 = (0..NUM_JOINTS).map(|j| (start.torques[j] * vel[3 + j]).max(0.0)).sum();
        next.energy += power * dt;
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(SubstepSample {
                torques: start.torques,
                qd: std::array::from_fn(|j| vel[3 + j]),
                base_velocity: [vel[0], vel[1]],
                dt,
            });
        }
        next.torques = start.torques;
        next.foot_forces = start.normal;

        let half = vel + 0.5 * dt * start.accel;
        pos += dt * half;
        let end = model.evaluate(&pos, &half, action, &next.anchors);
        vel = half + 0.5 * dt * end.accel;
        next.time += dt;

        let bound = config.divergence_bound;
        if let Some(i) = (0..DOF).find(|&i| !(pos[i].abs() <= bound && vel[i].abs() <= bound)) {
            return Err(SimError::NumericalDivergence {
                time: next.time,
                detail: format!("coordinate {i}: position {}, velocity {}", pos[i], vel[i]),
            });
        }
        model.update_anchors(&pos, &vel, &mut next.anchors);
    }

    next.set_generalized(&pos, &vel);
    next.base.pitch = crate::kinematics::wrap_angle(next.base.pitch);
    next.prev_action = *action;
    next.refresh_contacts(morph, config);
    Ok(next)
}

fn count_collisions(morph: &Morphology, base: &BasePose, q: &[f64; NUM_JOINTS]) -> usize {
    let (hl, ht) = (0.5 * morph.base_length, 0.5 * morph.base_thickness);
    let base_hit = [(-hl, -ht), (hl, -ht), (-hl, ht), (hl, ht)]
        .iter()
        .any(|&(x, z)| (base.position() + inverse_base_frame(base, Vec2::new(x, z))).y < 0.0);
    let knees = (0..NUM_LEGS).filter(|&leg| leg_points(morph, base, q, leg).knee.y < 0.0).count();
    usize::from(base_hit) + knees
}

struct Evaluation {
    accel: GenVec,
    torques: [f64; NUM_JOINTS],
    normal: [f64; NUM_LEGS],
}

/// One body's contribution: mass, rotational inertia about its COM, point
/// Jacobian columns, rotational Jacobian columns and velocity-product
/// acceleration of its COM.
struct BodyTerm {
    mass: f64,
    inertia: f64,
    cols: [(usize, Vec2); 5],
    n_cols: usize,
    bias: Vec2,
}

struct Model<'a> {
    morph: &'a Morphology,
    config: &'a SimConfig,
    params: &'a EpisodeParams,
    base_mass: f64,
    base_inertia: f64,
}

impl<'a> Model<'a> {
    fn new(morph: &'a Morphology, config: &'a SimConfig, params: &'a EpisodeParams) -> Self {
        let base_mass = morph.base_mass + params.added_base_mass;
        let base_inertia = morph.base_mass * (morph.base_length.powi(2) + morph.base_thickness.powi(2)) / 12.0;
        Model { morph, config, params, base_mass, base_inertia }
    }

    fn pose(pos: &GenVec, vel: &GenVec) -> (BasePose, [f64; NUM_JOINTS]) {
        let base = BasePose { x: pos[0], z: pos[1], pitch: pos[2], vx: vel[0], vz: vel[1], pitch_rate: vel[2] };
        (base, std::array::from_fn(|j| pos[3 + j]))
    }

    /// Jacobian columns of a point on `leg`; `on_shank` adds the knee column.
    fn point_columns(base: &BasePose, leg: usize, hip: Vec2, knee: Vec2, point: Vec2, on_shank: bool) -> ([(usize, Vec2); 5], usize) {
        let mut cols = [(0, Vec2::new(1.0, 0.0)), (1, Vec2::new(0.0, 1.0)), (2, perp(point - base.position())), (3 + 2 * leg, perp(point - hip)), (0, Vec2::zeros())];
        let mut n = 4;
        if on_shank {
            cols[4] = (3 + 2 * leg + 1, perp(point - knee));
            n = 5;
        }
        (cols, n)
    }

    fn evaluate(&self, pos: &GenVec, vel: &GenVec, action: &[f64; NUM_JOINTS], anchors: &[Option<f64>; NUM_LEGS]) -> Evaluation {
        let morph = self.morph;
        let g = self.config.gravity;
        let (base, q) = Self::pose(pos, vel);
        let qd: [f64; NUM_JOINTS] = std::array::from_fn(|j| vel[3 + j]);

        let mut mass = GenMat::zeros();
        let mut bias = GenVec::zeros();
        mass[(0, 0)] += self.base_mass;
        mass[(1, 1)] += self.base_mass;
        mass[(2, 2)] += self.base_inertia;
        bias[1] += self.base_mass * g;

        let mut force = GenVec::zeros();
        let torques = pd_torque(&q, &qd, action, self.config.kp, self.config.kd, self.params.motor_gain, morph.torque_limit);
        for j in 0..NUM_JOINTS {
            force[3 + j] = torques[j];
        }
        let mut normal = [0.0; NUM_LEGS];

        let (l1, l2) = (morph.thigh_length, morph.shank_length);
        for leg in 0..NUM_LEGS {
            let pts = leg_points(morph, &base, &q, leg);
            let w1 = base.pitch_rate + qd[2 * leg];
            let w2 = w1 + qd[2 * leg + 1];
            let offset = pts.hip - base.position();
            let thigh = pts.knee - pts.hip;
            let shank = pts.foot - pts.knee;
            let hip_bias = -base.pitch_rate.powi(2) * offset;

            let thigh_com = pts.hip + 0.5 * thigh;
            let shank_com = pts.knee + 0.5 * shank;
            let (tc, tn) = Self::point_columns(&base, leg, pts.hip, pts.knee, thigh_com, false);
            let (sc, sn) = Self::point_columns(&base, leg, pts.hip, pts.knee, shank_com, true);
            let bodies = [
                BodyTerm {
                    mass: morph.thigh_mass,
                    inertia: morph.thigh_mass * l1 * l1 / 12.0,
                    cols: tc,
                    n_cols: tn,
                    bias: hip_bias - w1 * w1 * 0.5 * thigh,
                },
                BodyTerm {
                    mass: morph.shank_mass,
                    inertia: morph.shank_mass * l2 * l2 / 12.0,
                    cols: sc,
                    n_cols: sn,
                    bias: hip_bias - w1 * w1 * thigh - w2 * w2 * 0.5 * shank,
                },
            ];
            for body in &bodies {
                let cols = &body.cols[..body.n_cols];
                let load = body.bias + Vec2::new(0.0, g);
                for &(a, ja) in cols {
                    bias[a] += body.mass * ja.dot(&load);
                    for &(b, jb) in cols {
                        mass[(a, b)] += body.mass * ja.dot(&jb);
                    }
                }
                // Rotational columns are the pitch and every joint on the chain.
                for &(a, _) in &cols[2..] {
                    for &(b, _) in &cols[2..] {
                        mass[(a, b)] += body.inertia;
                    }
                }
            }

            let depth = -pts.foot.y;
            if depth > 0.0 {
                let (fc, fnum) = Self::point_columns(&base, leg, pts.hip, pts.knee, pts.foot, true);
                let cols = &fc[..fnum];
                let foot_vel: Vec2 = cols.iter().map(|&(a, j)| j * vel[a]).sum();
                let n = (self.config.contact_stiffness * depth - self.config.contact_damping * foot_vel.y).max(0.0);
                let anchor = anchors[leg].unwrap_or(pts.foot.x);
                let limit = self.params.friction * n;
                let t = (-self.config.tangential_stiffness * (pts.foot.x - anchor)
                    - self.config.tangential_damping * foot_vel.x)
                    .clamp(-limit, limit);
                let f = Vec2::new(t, n);
                for &(a, j) in cols {
                    force[a] += j.dot(&f);
                }
                normal[leg] = n;
            }
        }

        let rhs = force - bias;
        let accel = match mass.cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => GenVec::from_element(f64::NAN),
        };
        Evaluation { accel, torques, normal }
    }

    fn update_anchors(&self, pos: &GenVec, vel: &GenVec, anchors: &mut [Option<f64>; NUM_LEGS]) {
        let (base, q) = Self::pose(pos, vel);
        let qd: [f64; NUM_JOINTS] = std::array::from_fn(|j| vel[3 + j]);
        let _ = qd;
        for leg in 0..NUM_LEGS {
            let pts = leg_points(self.morph, &base, &q, leg);
            let depth = -pts.foot.y;
            if depth <= 0.0 {
                anchors[leg] = None;
                continue;
            }
            let anchor = anchors[leg].unwrap_or(pts.foot.x);
            let (fc, fnum) = Self::point_columns(&base, leg, pts.hip, pts.knee, pts.foot, true);
            let foot_vz: f64 = fc[..fnum].iter().map(|&(a, j)| j.y * vel[a]).sum();
            let n = (self.config.contact_stiffness * depth - self.config.contact_damping * foot_vz).max(0.0);
            let max_stretch = self.params.friction * n / self.config.tangential_stiffness;
            let stretch = pts.foot.x - anchor;
            anchors[leg] = Some(if stretch.abs() > max_stretch {
                pts.foot.x - stretch.signum() * max_stretch
            } else {
                anchor
            });
        }
    }
}

/// Center of mass of the whole robot in world coordinates.
pub fn center_of_mass(morph: &Morphology, params: &EpisodeParams, base: &BasePose, q: &[f64; NUM_JOINTS]) -> Vec2 {
    let base_mass = morph.base_mass + params.added_base_mass;
    let mut moment = base_mass * base.position();
    let mut total = base_mass;
    for leg in 0..NUM_LEGS {
        let pts = leg_points(morph, base, q, leg);
        moment += morph.thigh_mass * 0.5 * (pts.hip + pts.knee);
        moment += morph.shank_mass * 0.5 * (pts.knee + pts.foot);
        total += morph.leg_mass();
    }
    moment / total
}
