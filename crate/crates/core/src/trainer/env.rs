use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amp::{disc_observation, pair_features, AMP_PAIR_DIM};
use crate::config::TrainConfig;
use crate::kinematics::{base_frame, BasePose, JointState, Morphology, NUM_JOINTS};
use crate::mocap::ReferenceDataset;
use crate::rewards::{
    complex_style_reward, sample_command, sample_resample_delay, task_reward, CommandTarget, ComplexInputs,
    ComplexReward, RewardMode, SwingTimers,
};
use crate::sim::{self, check_termination, randomize_episode, EpisodeParams, SimState};

/// Joint angles, joint velocities, `sin`/`cos` pitch, pitch rate, base-frame
/// linear velocity, previous action and the command.
pub const POLICY_OBS_DIM: usize = 2 * NUM_JOINTS + 2 + 1 + 2 + NUM_JOINTS + 3;

pub fn policy_observation(state: &SimState, cmd: &CommandTarget) -> [f64; POLICY_OBS_DIM] {
    let mut o = [0.0; POLICY_OBS_DIM];
    o[..8].copy_from_slice(&state.joints.q);
    o[8..16].copy_from_slice(&state.joints.qd);
    o[16] = state.base.pitch.sin();
    o[17] = state.base.pitch.cos();
    o[18] = state.base.pitch_rate;
    let v = base_frame(&state.base, state.base.velocity());
    o[19] = v.x;
    o[20] = v.y;
    o[21..29].copy_from_slice(&state.prev_action);
    o[29] = cmd.vx;
    o[30] = cmd.vy;
    o[31] = cmd.yaw_rate;
    o
}

/// Reference state initialization: a random dataset frame, shifted to `x = 0`.
pub fn reference_start(morph: &Morphology, config: &sim::SimConfig, dataset: &ReferenceDataset, rng: &mut impl Rng) -> SimState {
    let (clip, frame) = dataset.sample_frame(rng);
    let (base, joints) = dataset.clips[clip].frame_state(frame);
    let base = BasePose { x: 0.0, ..base };
    let mut state = sim::reset_from_reference(morph, config, &base, &joints);
    state.prev_action = joints.q;
    state
}

/// Result of one policy step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Discriminator features of `(s, s')`; `None` when the step diverged.
    pub amp_pair: Option<[f64; AMP_PAIR_DIM]>,
    pub task_reward: f64,
    pub complex: Option<ComplexReward>,
    pub terminated: bool,
    pub timed_out: bool,
    /// Observation of the final state of a timed-out episode, for bootstrapping.
    pub terminal_obs: Option<[f64; POLICY_OBS_DIM]>,
    pub positive_work: f64,
    pub forward_speed: f64,
    pub command_speed: f64,
    pub diverged: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.timed_out
    }
}

/// One randomized training environment with its own random stream.
#[derive(Clone, Debug)]
pub struct Env {
    pub state: SimState,
    pub params: EpisodeParams,
    pub cmd: CommandTarget,
    next_resample: f64,
    swing: SwingTimers,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(seed: u64, config: &TrainConfig, dataset: &ReferenceDataset) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = reference_start(&config.morphology, &config.sim, dataset, &mut rng);
        let mut env = Env {
            state,
            params: EpisodeParams::nominal(&config.sim),
            cmd: CommandTarget::default(),
            next_resample: 0.0,
            swing: SwingTimers::default(),
            rng,
        };
        env.reset(config, dataset);
        env
    }

    pub fn reset(&mut self, config: &TrainConfig, dataset: &ReferenceDataset) {
        self.state = reference_start(&config.morphology, &config.sim, dataset, &mut self.rng);
        self.params = if config.randomize { randomize_episode(&config.sim, &mut self.rng) } else { EpisodeParams::nominal(&config.sim) };
        self.cmd = sample_command(&config.commands, &mut self.rng);
        self.next_resample = sample_resample_delay(&config.commands, &mut self.rng);
        self.swing = SwingTimers::default();
    }

    pub fn observation(&self) -> [f64; POLICY_OBS_DIM] {
        policy_observation(&self.state, &self.cmd)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn step(&mut self, config: &TrainConfig, dataset: &ReferenceDataset, action: &[f64; NUM_JOINTS]) -> StepOutcome {
        let morph = &config.morphology;
        let dt = config.sim.policy_dt();
        let cmd = self.cmd;
        let before = disc_observation(morph, &self.state.base, &self.state.joints);
        let prev_qd = self.state.joints.qd;
        let prev_action = self.state.prev_action;
        let targets = config.joint_targets(action);

        let mut next = match sim::step(morph, &config.sim, &self.params, &self.state, &targets) {
            Ok(next) => next,
            Err(_) => {
                self.reset(config, dataset);
                return StepOutcome {
                    amp_pair: None,
                    task_reward: 0.0,
                    complex: None,
                    terminated: true,
                    timed_out: false,
                    terminal_obs: None,
                    positive_work: 0.0,
                    forward_speed: 0.0,
                    command_speed: cmd.vx,
                    diverged: true,
                };
            }
        };
        if config.randomize && next.time >= self.params.next_perturbation {
            next = sim::perturb_velocity(&next, &mut self.params, &config.sim, &mut self.rng);
        }
        let positive_work = next.energy - self.state.energy;
        self.state = next;

        let v_meas = [self.state.base.vx, 0.0];
        let r_task = task_reward(v_meas, 0.0, &cmd, config.rewards.linear_velocity, config.rewards.angular_velocity);
        let terminated = check_termination(&self.state, &config.sim);
        let timed_out = !terminated && self.state.time >= config.episode_length - 1e-9;

        let complex = (config.reward_mode == RewardMode::Complex).then(|| {
            self.swing.update(&self.state.contacts, dt);
            let v = base_frame(&self.state.base, self.state.base.velocity());
            let input = ComplexInputs {
                base_velocity: [v.x, v.y],
                pitch: self.state.base.pitch,
                pitch_rate: self.state.base.pitch_rate,
                q: self.state.joints.q,
                qd: self.state.joints.qd,
                prev_qd,
                torques: self.state.torques,
                action: targets,
                prev_action,
                collisions: self.state.collisions,
                terminated,
                v_meas,
                yaw_meas: 0.0,
                cmd,
                contacts: self.state.contacts,
                swing_times: self.swing.0,
                foot_forces: self.state.foot_forces,
                dt,
            };
            complex_style_reward(&input, morph, &config.rewards.complex)
        });

        let after = disc_observation(morph, &self.state.base, &self.state.joints);
        let forward_speed = self.state.base.vx;
        let terminal_obs = timed_out.then(|| self.observation());
        if terminated || timed_out {
            self.reset(config, dataset);
        } else if self.state.time >= self.next_resample {
            self.cmd = sample_command(&config.commands, &mut self.rng);
            self.next_resample = self.state.time + sample_resample_delay(&config.commands, &mut self.rng);
        }

        StepOutcome {
            amp_pair: Some(pair_features(&before, &after)),
            task_reward: r_task,
            complex,
            terminated,
            timed_out,
            terminal_obs,
            positive_work,
            forward_speed,
            command_speed: cmd.vx,
            diverged: false,
        }
    }
}

/// Starts an environment from a given state with nominal parameters.
pub fn joint_state_at_rest(morph: &Morphology) -> (BasePose, JointState) {
    let h = morph.nominal_height();
    (BasePose { z: h, ..BasePose::default() }, JointState { q: morph.standing_pose(h), qd: [0.0; NUM_JOINTS] })
}
