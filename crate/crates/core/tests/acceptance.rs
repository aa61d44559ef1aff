//! Acceptance checks, one PASS/FAIL line each. Oracles here are written
//! independently of the library code they check.

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use quadamp::amp::{disc_loss, style_reward};
use quadamp::config::TrainConfig;
use quadamp::eval::{classify_gait, evaluate_tracking, gait_diagram, EvalOptions, GaitClass, PolicyActor, TrackingRow};
use quadamp::kinematics::{forward_kinematics, BasePose, Morphology, NUM_JOINTS, NUM_LEGS};
use quadamp::mocap::{generate_procedural_gait, ClipFrame, GaitKind, MotionClip};
use quadamp::nn::{Adam, GaussianPolicy, Mlp, RunningNorm};
use quadamp::rewards::{complex_style_reward, CommandTarget, ComplexInputs, ComplexScales, RewardMode, NUM_COMPLEX_TERMS};
use quadamp::sim::{self, center_of_mass, EpisodeParams, SimConfig, SimState};
use quadamp::trainer::{collect_rollouts, gae_advantages, joint_state_at_rest, ppo_loss, train, Env, PpoMinibatch, Trainer, POLICY_OBS_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DESK_ITERATIONS: usize = 500;
const TRAINING_SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit: f64) -> bool {
    elapsed.as_secs_f64() < limit
}

// Reference MLP: ELU hidden layers, linear output, weights stored (in, out)
// row-major followed by the bias, layer after layer.

struct Layer<'a> {
    w: &'a [f64],
    b: &'a [f64],
    fan_in: usize,
    fan_out: usize,
}

fn layers<'a>(dims: &[usize], p: &'a [f64]) -> Vec<Layer<'a>> {
    let mut at = 0;
    let mut out = Vec::new();
    for d in dims.windows(2) {
        let (i, o) = (d[0], d[1]);
        out.push(Layer { w: &p[at..at + i * o], b: &p[at + i * o..at + i * o + o], fan_in: i, fan_out: o });
        at += i * o + o;
    }
    assert_eq!(at, p.len());
    out
}

fn ref_elu(u: f64) -> f64 {
    if u > 0.0 {
        u
    } else {
        u.exp() - 1.0
    }
}

/// Output plus the pre-activation of every layer.
fn ref_forward(dims: &[usize], p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let ls = layers(dims, p);
    let mut a = x.to_vec();
    let mut pre = Vec::new();
    for (k, l) in ls.iter().enumerate() {
        let mut z = l.b.to_vec();
        for i in 0..l.fan_in {
            for j in 0..l.fan_out {
                z[j] += a[i] * l.w[i * l.fan_out + j];
            }
        }
        pre.push(z.clone());
        a = if k + 1 < ls.len() { z.iter().map(|&u| ref_elu(u)).collect() } else { z };
    }
    (a, pre)
}

/// dD/dx for a scalar-output network by an explicit reverse sweep.
fn ref_input_grad(dims: &[usize], p: &[f64], x: &[f64]) -> Vec<f64> {
    let ls = layers(dims, p);
    let (_, pre) = ref_forward(dims, p, x);
    let mut g = vec![1.0];
    for k in (0..ls.len()).rev() {
        let l = &ls[k];
        let mut gin = vec![0.0; l.fan_in];
        for i in 0..l.fan_in {
            for j in 0..l.fan_out {
                gin[i] += l.w[i * l.fan_out + j] * g[j];
            }
        }
        if k > 0 {
            for (i, gi) in gin.iter_mut().enumerate() {
                let u = pre[k - 1][i];
                *gi *= if u > 0.0 { 1.0 } else { u.exp() };
            }
        }
        g = gin;
    }
    g
}

fn central_difference(p: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut q = p.to_vec();
    (0..p.len())
        .map(|k| {
            q[k] = p[k] + h;
            let up = f(&q);
            q[k] = p[k] - h;
            let down = f(&q);
            q[k] = p[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-8)
}

fn random_dims(rng: &mut impl Rng, input: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    for _ in 0..rng.random_range(1..=3) {
        dims.push(rng.random_range(3..=10));
    }
    dims.push(output);
    dims
}

fn random_net(dims: &[usize], rng: &mut impl Rng) -> Mlp {
    let n = dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum();
    let p = (0..n).map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal)).collect();
    Mlp::from_params(dims, p).unwrap()
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn row(a: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}

fn style_reward_exactness() -> Outcome {
    let start = Instant::now();
    let oracle = |d: f64| f64::max(0.0, 1.0 - (d - 1.0) * (d - 1.0) / 4.0);
    let mut worst: f64 = 0.0;
    for (d, want) in [(1.0, 1.0), (-1.0, 0.0), (0.0, 0.75)] {
        worst = worst.max((style_reward(d) - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut in_range = true;
    for _ in 0..10_000 {
        let d: f64 = rng.random_range(-10.0..10.0);
        let r = style_reward(d);
        in_range &= (0.0..=1.0).contains(&r);
        worst = worst.max((r - oracle(d)).abs());
    }
    let t = start.elapsed();
    outcome(worst < 1e-12 && in_range && within(t, 1.0), format!("max error {worst:.1e}, all in [0, 1]: {in_range}, {t:.2?}"))
}

fn disc_loss_exactness() -> Outcome {
    let start = Instant::now();
    // Saturated first layer: scores exactly +1 on x0 = 1 and -1 on x0 = -1,
    // with input gradients that vanish in floating point.
    let k = 1000.0;
    let c = -2.0 / (k + 1.0);
    let perfect = Mlp::from_params(&[2, 2, 1], vec![-k, k, 0.0, 0.0, 0.0, 0.0, c, 0.0, 1.0 + c]).unwrap();
    let real = ndarray::array![[1.0, 0.3], [1.0, -2.0], [1.0, 7.0]];
    let fake = ndarray::array![[-1.0, 0.0], [-1.0, 5.0]];
    let l0 = disc_loss(&perfect, real.view(), fake.view(), 10.0).unwrap().loss;

    let zero = Mlp::zeros(&[3, 5, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let r = random_matrix(7, 3, 2.0, &mut rng);
    let f = random_matrix(4, 3, 2.0, &mut rng);
    let l2 = disc_loss(&zero, r.view(), f.view(), 10.0).unwrap().loss;

    let w = [0.7, -1.3, 0.25, 2.0];
    let linear = Mlp::from_params(&[4, 1], vec![w[0], w[1], w[2], w[3], 0.4]).unwrap();
    let want = 10.0 / 2.0 * w.iter().map(|v| v * v).sum::<f64>();
    let r = random_matrix(9, 4, 3.0, &mut rng);
    let gp = disc_loss(&linear, r.view(), r.view(), 10.0).unwrap().penalty;

    let errs = [l0.abs(), (l2 - 2.0).abs(), (gp - want).abs()];
    let t = start.elapsed();
    let pass = errs.iter().all(|&e| e < 1e-9) && within(t, 1.0);
    outcome(pass, format!("|L-0| {:.1e}, |L-2| {:.1e}, |penalty-(w/2)|w|^2| {:.1e}, {t:.2?}", errs[0], errs[1], errs[2]))
}

fn mlp_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let out_dim = rng.random_range(1..=4);
    let input = rng.random_range(2..=6);
    let dims = random_dims(rng, input, out_dim);
    let net = random_net(&dims, rng);
    let x = random_matrix(5, dims[0], 2.0, rng);
    let upstream = random_matrix(5, out_dim, 1.0, rng);
    let (_, mut tape) = net.forward(x.view()).unwrap();
    let grad = net.backward(&mut tape, upstream.view()).unwrap();
    let fd = central_difference(net.params(), |p| {
        (0..x.nrows())
            .map(|i| {
                let (y, _) = ref_forward(&dims, p, &row(&x.view(), i));
                y.iter().zip(upstream.row(i)).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    });
    relative_error(&grad, &fd)
}

fn ppo_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let obs_dim = rng.random_range(2..=6);
    let act_dim = rng.random_range(1..=4);
    let hidden: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(3..=10)).collect();
    let offset: Vec<f64> = (0..act_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut policy = GaussianPolicy::new(obs_dim, &hidden, offset.clone(), 0.5, rng);
    let mut flat = policy.flat_params();
    flat.iter_mut().for_each(|v| *v += 0.3 * rng.sample::<f64, _>(StandardNormal));
    policy.set_flat_params(&flat);
    let mut dims = vec![obs_dim];
    dims.extend(&hidden);
    dims.push(act_dim);
    let value = random_net(&[obs_dim, 4, 1], rng);

    let n = 8;
    let obs = random_matrix(n, obs_dim, 2.0, rng);
    let actions = random_matrix(n, act_dim, 1.5, rng);
    let net_params = policy.mean.num_params();
    let log_prob = |p: &[f64], i: usize| -> f64 {
        let (mu, _) = ref_forward(&dims, &p[..net_params], &row(&obs.view(), i));
        (0..act_dim)
            .map(|j| {
                let ls = p[net_params + j];
                let z = (actions[[i, j]] - mu[j] - offset[j]) / ls.exp();
                -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
            })
            .sum()
    };
    // Old log-probabilities spread so that some samples sit in the clipped region.
    let old: Vec<f64> = (0..n).map(|i| log_prob(&flat, i) + rng.random_range(-0.5..0.5)).collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ret: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps = 0.2;
    let mb = PpoMinibatch { obs: obs.view(), actions: actions.view(), old_log_probs: &old, advantages: &adv, returns: &ret };
    let out = ppo_loss(&policy, &value, &mb, eps, 0.5, 0.0).unwrap();
    let fd = central_difference(&flat, |p| {
        -(0..n)
            .map(|i| {
                let ratio = (log_prob(p, i) - old[i]).exp();
                f64::min(ratio * adv[i], ratio.clamp(1.0 - eps, 1.0 + eps) * adv[i])
            })
            .sum::<f64>()
            / n as f64
    });
    relative_error(&out.policy_grad, &fd)
}

fn ref_disc_loss(dims: &[usize], p: &[f64], real: &Array2<f64>, fake: &Array2<f64>, w: f64) -> f64 {
    let (nr, nf) = (real.nrows() as f64, fake.nrows() as f64);
    let mut loss = 0.0;
    for i in 0..real.nrows() {
        let x = row(&real.view(), i);
        let d = ref_forward(dims, p, &x).0[0];
        let g2: f64 = ref_input_grad(dims, p, &x).iter().map(|g| g * g).sum();
        loss += (d - 1.0).powi(2) / nr + w / 2.0 * g2 / nr;
    }
    for i in 0..fake.nrows() {
        let d = ref_forward(dims, p, &row(&fake.view(), i)).0[0];
        loss += (d + 1.0).powi(2) / nf;
    }
    loss
}

fn disc_gradient(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let input = rng.random_range(2..=6);
    let dims = random_dims(rng, input, 1);
    let net = random_net(&dims, rng);
    let real = random_matrix(6, dims[0], 2.0, rng);
    let fake = random_matrix(5, dims[0], 2.0, rng);
    let out = disc_loss(&net, real.view(), fake.view(), 10.0).unwrap();
    let value_err = (out.loss - ref_disc_loss(&dims, net.params(), &real, &fake, 10.0)).abs();
    let fd = central_difference(net.params(), |p| ref_disc_loss(&dims, p, &real, &fake, 10.0));
    (relative_error(&out.grad, &fd), value_err)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut mlp, mut ppo, mut disc, mut value): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..20 {
        mlp = mlp.max(mlp_gradient(&mut rng));
        ppo = ppo.max(ppo_gradient(&mut rng));
        let (g, v) = disc_gradient(&mut rng);
        disc = disc.max(g);
        value = value.max(v);
    }
    let t = start.elapsed();
    let pass = mlp < 1e-4 && ppo < 1e-4 && disc < 1e-3 && value < 1e-9 && within(t, 60.0);
    outcome(pass, format!("max rel. err: mlp {mlp:.1e}, ppo surrogate {ppo:.1e}, disc loss with penalty {disc:.1e} (loss value {value:.1e}), {t:.2?}"))
}

fn lsgan_run(real_center: f64, fake_center: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4;
    let cloud = |center: f64, rng: &mut ChaCha8Rng| Array2::from_shape_fn((256, dim), |_| center + 0.5 * rng.sample::<f64, _>(StandardNormal));
    let real = cloud(real_center, &mut rng);
    let fake = cloud(fake_center, &mut rng);
    let mut net = Mlp::orthogonal(&[dim, 64, 64, 1], 2f64.sqrt(), 1.0, &mut rng);
    let mut adam = Adam::new(net.num_params(), 1e-3);
    for _ in 0..500 {
        let out = disc_loss(&net, real.view(), fake.view(), 10.0).unwrap();
        adam.step(net.params_mut(), &out.grad);
    }
    let mean = |x: &Array2<f64>| net.predict(x.view()).unwrap().mean().unwrap();
    (mean(&real), mean(&fake))
}

fn lsgan_separation() -> Outcome {
    let start = Instant::now();
    let (real, fake) = lsgan_run(2.0, -2.0, 14);
    let (same_a, same_b) = lsgan_run(2.0, 2.0, 15);
    let t = start.elapsed();
    let gap = (same_a - same_b).abs();
    let pass = real > 0.9 && fake < -0.9 && gap < 0.1 && within(t, 60.0);
    outcome(pass, format!("separable: real {real:.3}, fake {fake:.3}; identical: |diff| {gap:.3}, {t:.2?}"))
}

fn airborne_state(morph: &Morphology, config: &SimConfig, base: BasePose) -> SimState {
    let (_, joints) = joint_state_at_rest(morph);
    SimState::from_pose(morph, config, base, joints)
}

fn physics() -> Outcome {
    let start = Instant::now();
    let morph = Morphology::default();

    let config = SimConfig::default();
    let params = EpisodeParams::nominal(&config);
    let mut state = airborne_state(&morph, &config, BasePose { x: 0.2, z: 3.0, vx: 0.7, vz: 1.1, ..BasePose::default() });
    let hold = state.joints.q;
    let c0 = center_of_mass(&morph, &params, &state.base, &state.joints.q);
    let mut ballistic: f64 = 0.0;
    for _ in 0..(0.5 * config.policy_hz as f64).round() as usize {
        state = sim::step(&morph, &config, &params, &state, &hold).unwrap();
        let t = state.time;
        let c = center_of_mass(&morph, &params, &state.base, &state.joints.q);
        let (ox, oz) = (c0.x + 0.7 * t, c0.y + 1.1 * t - 0.5 * config.gravity * t * t);
        ballistic = ballistic.max((c.x - ox).hypot(c.y - oz));
    }

    let free = SimConfig { gravity: 0.0, kp: 0.0, kd: 0.0, ..SimConfig::default() };
    let params = EpisodeParams::nominal(&free);
    let s0 = airborne_state(&morph, &free, BasePose { x: -0.4, z: 2.0, pitch: 0.1, vx: 0.9, vz: -0.3, pitch_rate: 0.0 });
    let mut state = s0.clone();
    for _ in 0..free.policy_hz {
        state = sim::step(&morph, &free, &params, &state, &hold).unwrap();
    }
    let t = state.time;
    let mut drift = (state.base.x - (s0.base.x + 0.9 * t))
        .abs()
        .max((state.base.z - (s0.base.z - 0.3 * t)).abs())
        .max((state.base.pitch - s0.base.pitch).abs())
        .max((state.base.vx - 0.9).abs())
        .max((state.base.vz + 0.3).abs())
        .max(state.base.pitch_rate.abs());
    for j in 0..NUM_JOINTS {
        drift = drift.max((state.joints.q[j] - s0.joints.q[j]).abs()).max(state.joints.qd[j].abs());
    }

    let params = EpisodeParams::nominal(&config);
    let (base, joints) = joint_state_at_rest(&morph);
    let mut state = sim::reset_from_reference(&morph, &config, &base, &joints);
    let mut penetration: f64 = 0.0;
    for k in 0..3 * config.policy_hz {
        state = sim::step(&morph, &config, &params, &state, &joints.q).unwrap();
        if k >= 2 * config.policy_hz {
            penetration = state.foot_heights(&morph).iter().fold(penetration, |m, &h| m.max(-h));
        }
    }
    let t = start.elapsed();
    let pass = ballistic < 1e-4 && drift < 1e-9 && penetration < 1e-3 && within(t, 10.0);
    outcome(pass, format!("ballistic COM error {ballistic:.1e} m, free drift {drift:.1e}, steady penetration {penetration:.1e} m, {t:.2?}"))
}

fn retargeting() -> Outcome {
    let start = Instant::now();
    let morph = Morphology::default();
    let mut fk_err: f64 = 0.0;
    let mut frames = 0;
    let check = |clip: &MotionClip, err: &mut f64, count: &mut usize| {
        for f in &clip.frames {
            let base = BasePose { x: f.base[0], z: f.base[1], pitch: f.base[2], ..BasePose::default() };
            let feet = forward_kinematics(&morph, &base, &f.q);
            for leg in 0..NUM_LEGS {
                *err = err.max((feet[leg].x - f.feet[leg][0]).hypot(feet[leg].y - f.feet[leg][1]));
            }
            *count += 1;
        }
    };
    for gait in GaitKind::ALL {
        for (duration, fps) in [(1.1, 30.0), (4.0, 30.0), (2.0, 120.0)] {
            let clip = generate_procedural_gait(gait, gait.default_speed(), duration, fps, &morph).unwrap();
            check(&clip, &mut fk_err, &mut frames);
            // Keypoint-only documents go through the same inverse kinematics on load.
            let mut doc: serde_json::Value = serde_json::from_str(&clip.to_json_string()).unwrap();
            for frame in doc["frames"].as_array_mut().unwrap() {
                frame.as_object_mut().unwrap().remove("q");
            }
            let reloaded = MotionClip::from_json_str(&doc.to_string(), &morph).unwrap();
            check(&reloaded, &mut fk_err, &mut frames);
        }
    }

    let mut fd_err: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (lo, hi) = (morph.joint_lower(), morph.joint_upper());
    for _ in 0..20 {
        let fps = [30.0, 60.0, 50.0][rng.random_range(0..3)];
        let n = rng.random_range(2..60);
        let duration = (n - 1) as f64 / fps;
        let vb = [rng.random_range(-2.0..2.0), rng.random_range(-0.2..0.2), rng.random_range(-0.3..0.3)];
        let b0 = [rng.random_range(-1.0..1.0), 0.35, rng.random_range(-0.2..0.2)];
        let q0: [f64; NUM_JOINTS] = std::array::from_fn(|j| lo[j] + 0.3 * (hi[j] - lo[j]));
        let qd: [f64; NUM_JOINTS] = std::array::from_fn(|j| rng.random_range(-0.3..0.3) * (hi[j] - lo[j]) / duration);
        let frames: Vec<ClipFrame> = (0..n)
            .map(|i| {
                let t = i as f64 / fps;
                let base = [b0[0] + vb[0] * t, b0[1] + vb[1] * t, b0[2] + vb[2] * t];
                let q: [f64; NUM_JOINTS] = std::array::from_fn(|j| q0[j] + qd[j] * t);
                let pose = BasePose { x: base[0], z: base[1], pitch: base[2], ..BasePose::default() };
                let feet = forward_kinematics(&morph, &pose, &q).map(|p| [p.x, p.y]);
                ClipFrame { base, q, feet }
            })
            .collect();
        let clip = MotionClip::new("ramp", fps, frames, &morph).unwrap();
        for v in &clip.velocities {
            for k in 0..3 {
                fd_err = fd_err.max((v.base[k] - vb[k]).abs());
            }
            for j in 0..NUM_JOINTS {
                fd_err = fd_err.max((v.qd[j] - qd[j]).abs());
            }
        }
    }
    let t = start.elapsed();
    let pass = fk_err < 1e-6 && fd_err < 1e-9 && within(t, 10.0);
    outcome(pass, format!("FK(IK) error {fk_err:.1e} m over {frames} frames, ramp velocity error {fd_err:.1e}, {t:.2?}"))
}

const TABLE_SCALES: [f64; NUM_COMPLEX_TERMS] = [-2.0, -0.05, -0.01, -1e-5, -2.5e-7, -0.01, -1.0, -0.5, -10.0, -10.0, -0.0002, 1.0, 0.5, 1.0, -1.0];

/// Every row of the hand-designed reward table, one scalar at a time, in the
/// planar reading: pitch stands in for the xy angular terms, limits and
/// caps penalize the amount by which they are exceeded.
fn table_oracle(x: &ComplexInputs, morph: &Morphology) -> [f64; NUM_COMPLEX_TERMS] {
    let (lo, hi) = (morph.joint_lower(), morph.joint_upper());
    let mut t = [0.0; NUM_COMPLEX_TERMS];
    t[0] = x.base_velocity[1] * x.base_velocity[1];
    t[1] = x.pitch_rate.abs();
    t[2] = x.pitch.sin().abs();
    let mut s = 0.0;
    for j in 0..NUM_JOINTS {
        s += x.torques[j] * x.torques[j];
    }
    t[3] = s.sqrt();
    let mut s = 0.0;
    for j in 0..NUM_JOINTS {
        let acc = (x.qd[j] - x.prev_qd[j]) / x.dt;
        s += acc * acc;
    }
    t[4] = s.sqrt();
    let mut s = 0.0;
    for j in 0..NUM_JOINTS {
        let d = x.action[j] - x.prev_action[j];
        s += d * d;
    }
    t[5] = s.sqrt();
    t[6] = x.collisions as f64;
    t[7] = if x.terminated { 1.0 } else { 0.0 };
    for j in 0..NUM_JOINTS {
        if x.q[j] < lo[j] {
            t[8] += lo[j] - x.q[j];
        }
        if x.q[j] > hi[j] {
            t[9] += x.q[j] - hi[j];
        }
        if x.torques[j].abs() > morph.torque_limit {
            t[10] += x.torques[j].abs() - morph.torque_limit;
        }
    }
    let (ex, ey) = (x.cmd.vx - x.v_meas[0], x.cmd.vy - x.v_meas[1]);
    t[11] = (-(ex * ex + ey * ey).sqrt()).exp();
    t[12] = (-(x.cmd.yaw_rate - x.yaw_meas).abs()).exp();
    for leg in 0..NUM_LEGS {
        if !x.contacts[leg] {
            t[13] += x.swing_times[leg];
        }
    }
    let f_max = 1.5 * morph.total_mass() * morph.gravity;
    let mut s = 0.0;
    for leg in 0..NUM_LEGS {
        if x.foot_forces[leg] > f_max {
            s += (x.foot_forces[leg] - f_max).powi(2);
        }
    }
    t[14] = s.sqrt();
    t
}

fn random_inputs(rng: &mut ChaCha8Rng, morph: &Morphology) -> ComplexInputs {
    let (lo, hi) = (morph.joint_lower(), morph.joint_upper());
    let mut u = |a: f64, b: f64| rng.random_range(a..b);
    let q = std::array::from_fn(|j| u(lo[j] - 0.3, hi[j] + 0.3));
    let torques = std::array::from_fn(|_| u(-50.0, 50.0));
    let qd = std::array::from_fn(|_| u(-20.0, 20.0));
    let prev_qd = std::array::from_fn(|_| u(-20.0, 20.0));
    let action = std::array::from_fn(|_| u(-1.5, 1.5));
    let prev_action = std::array::from_fn(|_| u(-1.5, 1.5));
    let swing_times = std::array::from_fn(|_| u(0.0, 0.6));
    let foot_forces = std::array::from_fn(|_| u(0.0, 200.0));
    let base_velocity = [u(-2.0, 2.0), u(-1.0, 1.0)];
    let (pitch, pitch_rate) = (u(-1.2, 1.2), u(-4.0, 4.0));
    let v_meas = [u(-1.0, 2.0), 0.0];
    let yaw_meas = u(-0.5, 0.5);
    let cmd = CommandTarget { vx: u(-1.0, 2.0), vy: u(-0.3, 0.3), yaw_rate: u(-1.57, 1.57) };
    let collisions = rng.random_range(0..3);
    let terminated = rng.random_bool(0.2);
    let contacts = std::array::from_fn(|_| rng.random_bool(0.5));
    ComplexInputs {
        base_velocity,
        pitch,
        pitch_rate,
        q,
        qd,
        prev_qd,
        torques,
        action,
        prev_action,
        collisions,
        terminated,
        v_meas,
        yaw_meas,
        cmd,
        contacts,
        swing_times,
        foot_forces,
        dt: 1.0 / 30.0,
    }
}

fn table_ii() -> Outcome {
    let start = Instant::now();
    let morph = Morphology::default();
    let scales = ComplexScales::default();
    let scales_verbatim = scales.0 == TABLE_SCALES;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    let mut exercised = [false; NUM_COMPLEX_TERMS];
    for _ in 0..1000 {
        let x = random_inputs(&mut rng, &morph);
        let lib = complex_style_reward(&x, &morph, &scales);
        let want = table_oracle(&x, &morph);
        let mut total = 0.0;
        for i in 0..NUM_COMPLEX_TERMS {
            worst = worst.max((lib.terms[i] - want[i]).abs()).max((lib.scaled[i] - TABLE_SCALES[i] * want[i]).abs());
            total += TABLE_SCALES[i] * want[i];
            exercised[i] |= want[i] != 0.0;
        }
        worst = worst.max((lib.total - total).abs());
    }
    let t = start.elapsed();
    let all_exercised = exercised.iter().all(|&e| e);
    let pass = scales_verbatim && worst < 1e-12 && all_exercised && within(t, 10.0);
    outcome(pass, format!("max abs diff {worst:.1e} over 1000 states, scales verbatim: {scales_verbatim}, every term nonzero somewhere: {all_exercised}, {t:.2?}"))
}

fn gae() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = 20;
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
        let last: f64 = rng.random_range(-5.0..5.0);
        let (gamma, lambda) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
        let (adv, ret) = gae_advantages(&rewards, &values, &dones, last, gamma, lambda);
        for t in 0..n {
            // Sum of discounted TD errors until the episode ends.
            let mut a = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                let next = if k + 1 < n { values[k + 1] } else { last };
                let live = if dones[k] { 0.0 } else { 1.0 };
                let delta = rewards[k] + gamma * next * live - values[k];
                a += weight * delta;
                if dones[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            worst = worst.max((adv[t] - a).abs()).max((ret[t] - (a + values[t])).abs());
        }
    }
    let t = start.elapsed();
    outcome(worst < 1e-12 && within(t, 1.0), format!("max abs diff {worst:.1e} over 200 sequences, {t:.2?}"))
}

fn gait_closure() -> Outcome {
    let start = Instant::now();
    let morph = Morphology::default();
    let mut labels = Vec::new();
    let mut correct = 0;
    for (gait, want) in [(GaitKind::Pace, GaitClass::Pace), (GaitKind::Trot, GaitClass::Trot), (GaitKind::Canter, GaitClass::Canter)] {
        let clip = generate_procedural_gait(gait, gait.default_speed(), 4.0, 30.0, &morph).unwrap();
        let got = gait_diagram(&clip.contacts(1e-9), 1.0 / clip.fps).map(|d| classify_gait(&d)).unwrap_or(GaitClass::Unknown);
        correct += (got == want) as usize;
        labels.push(format!("{} -> {}", gait.name(), got.name()));
    }
    let t = start.elapsed();
    outcome(correct == 3 && within(t, 5.0), format!("{correct}/3 ({}), {t:.2?}", labels.join(", ")))
}

fn scratch_dir(name: &str) -> tempfile::TempDir {
    tempfile::Builder::new().prefix(name).tempdir().unwrap()
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let mut config = TrainConfig::desk();
    config.ppo.iterations = 3;
    config.ppo.seed = 5;
    let run = |dir: &Path| {
        let mut trainer = Trainer::new(config.clone()).unwrap();
        let summary = train(&mut trainer, dir, |_| {}).unwrap();
        std::fs::read(summary.metrics_path).unwrap()
    };
    let (a, b) = (scratch_dir("det-a"), scratch_dir("det-b"));
    let (first, second) = (run(a.path()), run(b.path()));
    let rows = String::from_utf8_lossy(&first).lines().count() - 1;
    let t = start.elapsed();
    outcome(first == second && rows >= 3, format!("{rows} rows, identical bytes: {}, {t:.2?}", first == second))
}

struct TrainedPolicy {
    style_final: f64,
    baseline_style: f64,
    row: TrackingRow,
    seconds: f64,
}

/// Style reward of a policy that ignores its observations and samples
/// actions from a unit Gaussian, scored by `disc`.
fn random_policy_style(config: &TrainConfig, trainer: &Trainer) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut policy = GaussianPolicy::new(POLICY_OBS_DIM, &[8], vec![0.0; NUM_JOINTS], 1.0, &mut rng);
    policy.mean.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let value = Mlp::zeros(&[POLICY_OBS_DIM, 1]);
    let mut envs: Vec<Env> = (0..config.ppo.num_envs).map(|i| Env::new(1000 + i as u64, config, &trainer.dataset)).collect();
    let norm = RunningNorm::new(POLICY_OBS_DIM);
    let batch = collect_rollouts(&mut envs, config.ppo.steps_per_env, config, &trainer.dataset, &policy, &value, &norm, Some(&trainer.disc)).unwrap();
    batch.style_rewards.iter().sum::<f64>() / batch.style_rewards.len() as f64
}

fn train_desk(mode: RewardMode) -> TrainedPolicy {
    let mut config = TrainConfig::desk();
    config.reward_mode = mode;
    config.ppo.iterations = DESK_ITERATIONS;
    config.ppo.seed = TRAINING_SEED;
    config.ppo.checkpoint_interval = DESK_ITERATIONS;
    let dir = scratch_dir(&mode.to_string());
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone()).unwrap();
    let summary = train(&mut trainer, dir.path(), |m| {
        if m.iteration % 50 == 0 {
            eprintln!(
                "  [{}] iter {} task {:.3} style {:.3} track err {:.3} ({:.0} s)",
                mode.to_string(),
                m.iteration,
                m.mean_task_reward,
                m.mean_style_reward,
                m.tracking_error,
                start.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let tail = &summary.metrics[summary.metrics.len().saturating_sub(10)..];
    let style_final = tail.iter().map(|m| m.mean_style_reward).sum::<f64>() / tail.len() as f64;
    let baseline_style = if mode == RewardMode::Amp { random_policy_style(&config, &trainer) } else { f64::NAN };
    let ckpt = trainer.checkpoint();
    let actor = PolicyActor::from_checkpoint(&ckpt, false);
    let report = evaluate_tracking(&actor, &config, &trainer.dataset, &[0.8], &EvalOptions::default()).unwrap();
    TrainedPolicy { style_final, baseline_style, row: report.rows[0].clone(), seconds }
}

fn desk_training() -> Vec<(String, Outcome)> {
    let amp = train_desk(RewardMode::Amp);
    let none = train_desk(RewardMode::None);
    let minutes = (amp.seconds + none.seconds) / 60.0;
    let budget = format!("{DESK_ITERATIONS} iterations each, {minutes:.1} min for both runs");
    let err = (amp.row.mean_speed - 0.8).abs();
    vec![
        (
            "desk training (a) style reward vs random policy".into(),
            outcome(
                amp.style_final >= 3.0 * amp.baseline_style,
                format!("final-10 style {:.3}, random-policy {:.3}, ratio {:.1}, {budget}", amp.style_final, amp.baseline_style, amp.style_final / amp.baseline_style),
            ),
        ),
        (
            "desk training (b) tracking at 0.8 m/s".into(),
            outcome(err < 0.3, format!("measured {:.3} +- {:.3} m/s, error {err:.3} m/s, falls {}", amp.row.mean_speed, amp.row.std_speed, amp.row.falls)),
        ),
        (
            "desk training (c) COT amp < none at 0.8 m/s".into(),
            outcome(amp.row.mean_cot < none.row.mean_cot, format!("amp {:.3}, none {:.3} (none moves at {:.3} m/s)", amp.row.mean_cot, none.row.mean_cot, none.row.mean_speed)),
        ),
        (
            "desk training (d) joint speed none > amp".into(),
            outcome(
                none.row.mean_joint_speed > amp.row.mean_joint_speed,
                format!("mean |qd| none {:.3} rad/s, amp {:.3} rad/s", none.row.mean_joint_speed, amp.row.mean_joint_speed),
            ),
        ),
    ]
}

fn main() {
    let mut results: Vec<(String, Outcome)> = vec![
        ("style reward exactness".into(), style_reward_exactness()),
        ("discriminator loss exactness".into(), disc_loss_exactness()),
        ("gradient suite".into(), gradient_suite()),
        ("LSGAN separation".into(), lsgan_separation()),
        ("physics oracles".into(), physics()),
        ("retargeting round trip".into(), retargeting()),
        ("complex reward table oracle".into(), table_ii()),
        ("GAE brute force".into(), gae()),
        ("gait pipeline closure".into(), gait_closure()),
        ("determinism".into(), determinism()),
    ];
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if std::env::var_os("QUADAMP_SKIP_TRAINING").is_none() {
        for (name, o) in desk_training() {
            println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((name, o));
        }
    } else {
        println!("SKIP desk training: QUADAMP_SKIP_TRAINING is set");
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
