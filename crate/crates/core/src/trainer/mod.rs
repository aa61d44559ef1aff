//! PPO with generalized advantage estimation, jointly optimized with the
//! motion-prior discriminator.
//!
//! One iteration collects `num_envs x steps_per_env` transitions, scores
//! them with the discriminator as it stood at the start of the iteration,
//! then runs `epochs` passes of minibatch PPO. Each epoch ends with one
//! discriminator step and a learning-rate adjustment from the observed KL.

mod env;
mod ppo;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use env::{joint_state_at_rest, policy_observation, reference_start, Env, StepOutcome, POLICY_OBS_DIM};
pub use ppo::{adapt_learning_rate, approx_kl, gaussian_kl, gae_advantages, normalize_advantages, ppo_loss, PpoLoss, PpoMinibatch};

use crate::amp::{update_discriminator, AmpError, Discriminator, AMP_PAIR_DIM};
use crate::checkpoint::{checkpoint_name, Checkpoint};
use crate::config::{ConfigError, TrainConfig};
use crate::kinematics::NUM_JOINTS;
use crate::mocap::{ClipError, ReferenceDataset};
use crate::nn::{clip_grad_norm, Adam, GaussianPolicy, Mlp, NnError, RunningNorm};
use crate::rewards::{RewardMode, COMPLEX_TERM_NAMES, NUM_COMPLEX_TERMS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reference dataset: {0}")]
    Clip(#[from] ClipError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Amp(#[from] AmpError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },
}

/// Ring buffer of recent policy transitions used as discriminator negatives.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    rows: Vec<[f64; AMP_PAIR_DIM]>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { rows: Vec::new(), capacity, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: [f64; AMP_PAIR_DIM]) {
        if self.rows.len() < self.capacity {
            self.rows.push(row);
        } else {
            self.rows[self.next] = row;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let mut out = Array2::zeros((n, AMP_PAIR_DIM));
        for mut row in out.rows_mut() {
            let src = &self.rows[rng.random_range(0..self.rows.len())];
            row.iter_mut().zip(src).for_each(|(d, s)| *d = *s);
        }
        out
    }
}

/// Transitions from one collection pass, stored env-major
/// (index `env * steps + t`).
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub steps: usize,
    /// Normalized with the statistics in force during collection.
    pub obs: Array2<f64>,
    pub raw_obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub task_rewards: Vec<f64>,
    pub style_rewards: Vec<f64>,
    pub complex_rewards: Vec<f64>,
    /// Training reward, including the bootstrap added at time limits.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub amp_pairs: Vec<Option<[f64; AMP_PAIR_DIM]>>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub complex_terms: [f64; NUM_COMPLEX_TERMS],
    pub positive_work: f64,
    pub distance: f64,
    pub tracking_error: f64,
    pub terminations: usize,
    pub divergences: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_pairs(&self) -> Array2<f64> {
        let rows: Vec<&[f64; AMP_PAIR_DIM]> = self.amp_pairs.iter().flatten().collect();
        Array2::from_shape_fn((rows.len(), AMP_PAIR_DIM), |(i, j)| rows[i][j])
    }

    pub fn mean(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }
}

fn matrix<const N: usize>(rows: &[[f64; N]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), N), |(i, j)| rows[i][j])
}

struct StepRecord {
    action: [f64; NUM_JOINTS],
    log_prob: f64,
    outcome: StepOutcome,
}

/// Steps every environment `steps` times with actions sampled from the
/// policy, then scores transitions and computes advantages.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    envs: &mut [Env],
    steps: usize,
    config: &TrainConfig,
    dataset: &ReferenceDataset,
    policy: &GaussianPolicy,
    value: &Mlp,
    obs_norm: &RunningNorm,
    disc: Option<&Discriminator>,
) -> Result<RolloutBatch, TrainError> {
    let n_env = envs.len();
    let n = n_env * steps;
    let idx = |e: usize, t: usize| e * steps + t;
    let mut obs = Array2::zeros((n, POLICY_OBS_DIM));
    let mut raw_obs = Array2::zeros((n, POLICY_OBS_DIM));
    let mut actions = Array2::zeros((n, NUM_JOINTS));
    let mut log_probs = vec![0.0; n];
    let mut values = vec![0.0; n];
    let mut task_rewards = vec![0.0; n];
    let mut complex_rewards = vec![0.0; n];
    let mut bootstrap = vec![0.0; n];
    let mut dones = vec![false; n];
    let mut amp_pairs = vec![None; n];
    let mut complex_terms = [0.0; NUM_COMPLEX_TERMS];
    let (mut positive_work, mut distance, mut tracking_error) = (0.0, 0.0, 0.0);
    let (mut terminations, mut divergences) = (0, 0);
    let dt = config.sim.policy_dt();

    for t in 0..steps {
        let raw: Vec<[f64; POLICY_OBS_DIM]> = envs.iter().map(Env::observation).collect();
        let raw = matrix(&raw);
        let normed = obs_norm.normalize(raw.view());
        let means = policy.means(normed.view())?;
        let v = value.predict(normed.view())?;

        let mean_rows: Vec<Vec<f64>> = means.outer_iter().map(|r| r.to_vec()).collect();
        let records: Vec<StepRecord> = envs
            .par_iter_mut()
            .zip(mean_rows.par_iter())
            .map(|(env, mean)| {
                let (a, log_prob) = policy.sample(mean, env.rng());
                let action: [f64; NUM_JOINTS] = a.try_into().expect("policy emits one target per joint");
                let outcome = env.step(config, dataset, &action);
                StepRecord { action, log_prob, outcome }
            })
            .collect();

        let mut timeouts = Vec::new();
        for (e, rec) in records.into_iter().enumerate() {
            let i = idx(e, t);
            obs.row_mut(i).assign(&normed.row(e));
            raw_obs.row_mut(i).assign(&raw.row(e));
            actions.row_mut(i).iter_mut().zip(&rec.action).for_each(|(d, s)| *d = *s);
            log_probs[i] = rec.log_prob;
            values[i] = v[[e, 0]];
            let o = rec.outcome;
            task_rewards[i] = o.task_reward;
            if let Some(c) = &o.complex {
                complex_rewards[i] = c.total;
                complex_terms.iter_mut().zip(&c.scaled).for_each(|(s, x)| *s += x);
            }
            dones[i] = o.done();
            amp_pairs[i] = o.amp_pair;
            positive_work += o.positive_work;
            distance += o.forward_speed.abs() * dt;
            tracking_error += (o.forward_speed - o.command_speed).abs();
            terminations += o.terminated as usize;
            divergences += o.diverged as usize;
            if let Some(term) = o.terminal_obs {
                timeouts.push((i, term));
            }
        }
        if !timeouts.is_empty() {
            let term: Vec<[f64; POLICY_OBS_DIM]> = timeouts.iter().map(|(_, o)| *o).collect();
            let tv = value.predict(obs_norm.normalize(matrix(&term).view()).view())?;
            for (k, (i, _)) in timeouts.iter().enumerate() {
                bootstrap[*i] = config.ppo.gamma * tv[[k, 0]];
            }
        }
    }

    let last: Vec<[f64; POLICY_OBS_DIM]> = envs.iter().map(Env::observation).collect();
    let last_values = value.predict(obs_norm.normalize(matrix(&last).view()).view())?;

    let style_rewards = match (config.reward_mode, disc) {
        (RewardMode::Amp, Some(disc)) => {
            let valid: Vec<usize> = (0..n).filter(|&i| amp_pairs[i].is_some()).collect();
            let pairs = Array2::from_shape_fn((valid.len(), AMP_PAIR_DIM), |(r, j)| amp_pairs[valid[r]].unwrap()[j]);
            let scored = disc.style_rewards(pairs.view())?;
            let mut style = vec![0.0; n];
            valid.iter().zip(scored).for_each(|(&i, s)| style[i] = s);
            style
        }
        _ => vec![0.0; n],
    };

    let w = &config.rewards;
    let rewards: Vec<f64> = (0..n)
        .map(|i| {
            let base = match config.reward_mode {
                RewardMode::Amp => w.task * task_rewards[i] + w.style * style_rewards[i],
                RewardMode::None => w.task * task_rewards[i],
                RewardMode::Complex => complex_rewards[i],
            };
            base + bootstrap[i]
        })
        .collect();

    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    for e in 0..n_env {
        let r = idx(e, 0)..idx(e, 0) + steps;
        let (a, ret) = gae_advantages(&rewards[r.clone()], &values[r.clone()], &dones[r.clone()], last_values[[e, 0]], config.ppo.gamma, config.ppo.lambda);
        advantages[r.clone()].copy_from_slice(&a);
        returns[r].copy_from_slice(&ret);
    }

    let nf = n.max(1) as f64;
    Ok(RolloutBatch {
        num_envs: n_env,
        steps,
        obs,
        raw_obs,
        actions,
        log_probs,
        values,
        task_rewards,
        style_rewards,
        complex_rewards,
        rewards,
        dones,
        amp_pairs,
        advantages,
        returns,
        complex_terms: complex_terms.map(|s| s / nf),
        positive_work,
        distance,
        tracking_error: tracking_error / nf,
        terminations,
        divergences,
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub mean_task_reward: f64,
    pub mean_style_reward: f64,
    pub disc_real_score: f64,
    pub disc_fake_score: f64,
    pub kl: f64,
    pub lr: f64,
    pub cot: f64,
    pub tracking_error: f64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub terminations: usize,
    pub update_skipped: bool,
    pub complex_terms: [f64; NUM_COMPLEX_TERMS],
}

pub fn metrics_header() -> String {
    let mut cols: Vec<String> = [
        "iteration",
        "mean_task_reward",
        "mean_style_reward",
        "disc_real_score",
        "disc_fake_score",
        "kl",
        "lr",
        "cot",
        "tracking_error",
        "mean_reward",
        "policy_loss",
        "value_loss",
        "entropy",
        "clip_fraction",
        "terminations",
        "update_skipped",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(COMPLEX_TERM_NAMES.iter().map(|n| format!("complex_{n}")));
    cols.join(",")
}

impl IterationMetrics {
    /// Shortest round-trip formatting, so equal runs give equal bytes.
    pub fn csv_row(&self) -> String {
        let mut fields = vec![
            self.iteration.to_string(),
            self.mean_task_reward.to_string(),
            self.mean_style_reward.to_string(),
            self.disc_real_score.to_string(),
            self.disc_fake_score.to_string(),
            self.kl.to_string(),
            self.lr.to_string(),
            self.cot.to_string(),
            self.tracking_error.to_string(),
            self.mean_reward.to_string(),
            self.policy_loss.to_string(),
            self.value_loss.to_string(),
            self.entropy.to_string(),
            self.clip_fraction.to_string(),
            self.terminations.to_string(),
            (self.update_skipped as u8).to_string(),
        ];
        fields.extend(self.complex_terms.iter().map(|v| v.to_string()));
        fields.join(",")
    }
}

pub fn load_dataset(config: &TrainConfig) -> Result<ReferenceDataset, ClipError> {
    match &config.dataset {
        Some(dir) => ReferenceDataset::load_dir(dir, &config.morphology),
        None => ReferenceDataset::procedural(&config.morphology, config.amp.clip_duration, config.amp.clip_fps),
    }
}

/// Complete optimization state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: ReferenceDataset,
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub obs_norm: RunningNorm,
    pub disc: Discriminator,
    pub envs: Vec<Env>,
    pub replay: ReplayBuffer,
    pub lr: f64,
    pub iteration: u64,
    policy_opt: Adam,
    value_opt: Adam,
    disc_opt: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let dataset = load_dataset(&config)?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: TrainConfig, dataset: ReferenceDataset) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.ppo.seed);
        let offset = vec![0.0; NUM_JOINTS];
        let nets = &config.networks;
        let policy = GaussianPolicy::new(POLICY_OBS_DIM, &nets.policy_hidden, offset, config.ppo.init_std, &mut rng);
        let mut value_dims = vec![POLICY_OBS_DIM];
        value_dims.extend_from_slice(&nets.value_hidden);
        value_dims.push(1);
        let value = Mlp::orthogonal(&value_dims, 2f64.sqrt(), 1.0, &mut rng);
        let disc = Discriminator::new(&nets.disc_hidden, config.amp.gp_weight, &mut rng);
        let envs = (0..config.ppo.num_envs).map(|_| Env::new(rng.random(), &config, &dataset)).collect();
        let lr = config.ppo.learning_rate;
        Ok(Trainer {
            policy_opt: Adam::new(policy.num_params(), lr),
            value_opt: Adam::new(value.num_params(), lr),
            disc_opt: Adam::new(disc.net.num_params(), config.amp.learning_rate),
            replay: ReplayBuffer::new(config.amp.replay_capacity),
            obs_norm: RunningNorm::new(POLICY_OBS_DIM),
            policy,
            value,
            disc,
            envs,
            lr,
            iteration: 0,
            rng,
            dataset,
            config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            learning_rate: self.lr,
            config: self.config.clone(),
            policy: self.policy.clone(),
            value: self.value.clone(),
            obs_norm: self.obs_norm.clone(),
            disc: self.disc.clone(),
        }
    }

    /// Collects rollouts with the current networks without updating anything.
    pub fn rollout(&mut self) -> Result<RolloutBatch, TrainError> {
        let amp = self.config.reward_mode == RewardMode::Amp;
        collect_rollouts(
            &mut self.envs,
            self.config.ppo.steps_per_env,
            &self.config,
            &self.dataset,
            &self.policy,
            &self.value,
            &self.obs_norm,
            amp.then_some(&self.disc),
        )
    }

    fn real_batch(&mut self, n: usize) -> Array2<f64> {
        let morph = &self.config.morphology;
        let mut out = Array2::zeros((n, AMP_PAIR_DIM));
        for mut row in out.rows_mut() {
            let (s, s2) = self.dataset.sample_transition(morph, &mut self.rng);
            row.iter_mut().zip(s.0.iter().chain(&s2.0)).for_each(|(d, v)| *d = *v);
        }
        out
    }

    pub fn iterate(&mut self) -> Result<IterationMetrics, TrainError> {
        let mut batch = self.rollout()?;
        let amp = self.config.reward_mode == RewardMode::Amp;
        let cfg = self.config.ppo.clone();
        let n = batch.len();

        if amp {
            let fake = batch.valid_pairs();
            for row in fake.rows() {
                self.replay.push(row.as_slice().unwrap().try_into().unwrap());
            }
            let real = self.real_batch(fake.nrows().max(1));
            self.disc.normalizer.update(real.view());
            self.disc.normalizer.update(fake.view());
        }
        normalize_advantages(&mut batch.advantages);

        let old_means = self.policy.means(batch.obs.view())?;
        let saved = (self.policy.clone(), self.value.clone(), self.policy_opt.clone(), self.value_opt.clone(), self.lr);
        let mut indices: Vec<usize> = (0..n).collect();
        let mut totals = (0.0, 0.0, 0.0, 0usize);
        let mut disc_scores = (0.0, 0.0);
        let mut kl = 0.0;
        let mut skipped = false;

        'epochs: for _ in 0..cfg.epochs {
            indices.shuffle(&mut self.rng);
            for chunk in indices.chunks(cfg.minibatch_size) {
                let obs = batch.obs.select(Axis(0), chunk);
                let actions = batch.actions.select(Axis(0), chunk);
                let pick = |v: &[f64]| chunk.iter().map(|&i| v[i]).collect::<Vec<f64>>();
                let (old, adv, ret) = (pick(&batch.log_probs), pick(&batch.advantages), pick(&batch.returns));
                let mb = PpoMinibatch { obs: obs.view(), actions: actions.view(), old_log_probs: &old, advantages: &adv, returns: &ret };
                let mut loss = ppo_loss(&self.policy, &self.value, &mb, cfg.clip, cfg.value_coef, cfg.entropy_coef)?;
                let finite = loss.total.is_finite() && loss.policy_grad.iter().chain(&loss.value_grad).all(|g| g.is_finite());
                if !finite {
                    skipped = true;
                    break 'epochs;
                }
                clip_grad_norm(&mut loss.policy_grad, cfg.max_grad_norm);
                clip_grad_norm(&mut loss.value_grad, cfg.max_grad_norm);
                let mut flat = self.policy.flat_params();
                self.policy_opt.step(&mut flat, &loss.policy_grad);
                self.policy.set_flat_params(&flat);
                self.value_opt.step(self.value.params_mut(), &loss.value_grad);
                totals.0 += loss.surrogate;
                totals.1 += loss.value_loss;
                totals.2 += loss.clip_fraction;
                totals.3 += 1;
            }
            if amp && !self.replay.is_empty() {
                let real = self.real_batch(cfg.minibatch_size);
                let fake = self.replay.sample(cfg.minibatch_size, &mut self.rng);
                let m = update_discriminator(&mut self.disc, real.view(), fake.view(), &mut self.disc_opt)?;
                disc_scores.0 += m.real_score / cfg.epochs as f64;
                disc_scores.1 += m.fake_score / cfg.epochs as f64;
            }
            kl = gaussian_kl(&saved.0, old_means.view(), &self.policy, batch.obs.view())?;
            if !kl.is_finite() {
                skipped = true;
                break;
            }
            self.lr = adapt_learning_rate(kl, self.lr, cfg.desired_kl);
            self.policy_opt.lr = self.lr;
            self.value_opt.lr = self.lr;
        }
        if skipped {
            (self.policy, self.value, self.policy_opt, self.value_opt, self.lr) = saved;
        }

        self.obs_norm.update(batch.raw_obs.view());
        self.iteration += 1;

        let weight = self.config.morphology.weight();
        let steps = totals.3.max(1) as f64;
        let mean_speed = batch.distance / (n as f64 * self.config.sim.policy_dt());
        Ok(IterationMetrics {
            iteration: self.iteration,
            mean_task_reward: RolloutBatch::mean(&batch.task_rewards),
            mean_style_reward: RolloutBatch::mean(&batch.style_rewards),
            disc_real_score: disc_scores.0,
            disc_fake_score: disc_scores.1,
            kl,
            lr: self.lr,
            cot: if mean_speed >= crate::rewards::MIN_COT_SPEED { batch.positive_work / (weight * batch.distance) } else { f64::NAN },
            tracking_error: batch.tracking_error,
            mean_reward: RolloutBatch::mean(&batch.rewards),
            policy_loss: totals.0 / steps,
            value_loss: totals.1 / steps,
            entropy: self.policy.entropy(),
            clip_fraction: totals.2 / steps,
            terminations: batch.terminations,
            update_skipped: skipped,
            complex_terms: batch.complex_terms,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<IterationMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Runs `config.ppo.iterations` iterations, writing `metrics.csv` and
/// periodic `ckpt_<iter>.ampf` files into `out_dir`.
pub fn train(trainer: &mut Trainer, out_dir: impl AsRef<Path>, mut on_iteration: impl FnMut(&IterationMetrics)) -> Result<TrainSummary, TrainError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(file, "{}", metrics_header())?;

    let (tx, rx) = mpsc::channel::<String>();
    let writer = std::thread::spawn(move || -> std::io::Result<()> {
        for line in rx {
            writeln!(file, "{line}")?;
            file.flush()?;
        }
        Ok(())
    });

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let total = trainer.config.ppo.iterations;
    let interval = trainer.config.ppo.checkpoint_interval.max(1) as u64;
    let result = (|| {
        for _ in 0..total {
            let m = trainer.iterate()?;
            tx.send(m.csv_row()).expect("metrics writer alive");
            on_iteration(&m);
            if m.iteration % interval == 0 || m.iteration == total as u64 {
                let path = out_dir.join(checkpoint_name(m.iteration));
                trainer.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
            metrics.push(m);
        }
        Ok::<(), TrainError>(())
    })();
    drop(tx);
    writer.join().expect("metrics writer panicked")?;
    result?;
    Ok(TrainSummary { metrics, checkpoints, metrics_path })
}
