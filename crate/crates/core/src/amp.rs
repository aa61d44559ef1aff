//! Adversarial motion prior: discriminator features, the least-squares
//! discriminator objective with a zero-centered input-gradient penalty on
//! reference samples, and the bounded style reward.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use thiserror::Error;

use crate::kinematics::{base_frame, forward_kinematics, BasePose, JointState, Morphology, NUM_JOINTS, NUM_LEGS};
use crate::nn::{Adam, Mlp, NnError, RunningNorm};

/// Joint angles, joint velocities, base-frame linear velocity, pitch rate,
/// base height and base-frame foot positions.
pub const AMP_OBS_DIM: usize = 2 * NUM_JOINTS + 2 + 1 + 1 + 2 * NUM_LEGS;
pub const AMP_PAIR_DIM: usize = 2 * AMP_OBS_DIM;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmpObservation(pub [f64; AMP_OBS_DIM]);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmpError {
    #[error("discriminator batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Feature extraction shared by simulator states and reference frames.
pub fn disc_observation(morph: &Morphology, base: &BasePose, joints: &JointState) -> AmpObservation {
    let mut f = [0.0; AMP_OBS_DIM];
    f[..NUM_JOINTS].copy_from_slice(&joints.q);
    f[NUM_JOINTS..2 * NUM_JOINTS].copy_from_slice(&joints.qd);
    let v = base_frame(base, base.velocity());
    let mut i = 2 * NUM_JOINTS;
    f[i] = v.x;
    f[i + 1] = v.y;
    f[i + 2] = base.pitch_rate;
    f[i + 3] = base.z;
    i += 4;
    for foot in forward_kinematics(morph, base, &joints.q) {
        let local = base_frame(base, foot - base.position());
        f[i] = local.x;
        f[i + 1] = local.y;
        i += 2;
    }
    AmpObservation(f)
}

pub fn pair_features(s: &AmpObservation, next: &AmpObservation) -> [f64; AMP_PAIR_DIM] {
    let mut out = [0.0; AMP_PAIR_DIM];
    out[..AMP_OBS_DIM].copy_from_slice(&s.0);
    out[AMP_OBS_DIM..].copy_from_slice(&next.0);
    out
}

/// `max(0, 1 - (d - 1)^2 / 4)`.
pub fn style_reward(d: f64) -> f64 {
    (1.0 - 0.25 * (d - 1.0).powi(2)).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
    pub normalizer: RunningNorm,
    pub gp_weight: f64,
}

impl Discriminator {
    pub fn new(hidden: &[usize], gp_weight: f64, rng: &mut impl Rng) -> Self {
        let mut dims = vec![AMP_PAIR_DIM];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Discriminator {
            net: Mlp::orthogonal(&dims, 2f64.sqrt(), 0.1, rng),
            normalizer: RunningNorm::new(AMP_PAIR_DIM),
            gp_weight,
        }
    }

    /// Raw scores for a batch of un-normalized transition features.
    pub fn scores(&self, pairs: ArrayView2<f64>) -> Result<Vec<f64>, AmpError> {
        let x = self.normalizer.normalize(pairs);
        Ok(self.net.predict(x.view())?.column(0).to_vec())
    }

    pub fn style_rewards(&self, pairs: ArrayView2<f64>) -> Result<Vec<f64>, AmpError> {
        Ok(self.scores(pairs)?.into_iter().map(style_reward).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscLoss {
    pub loss: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
    pub penalty: f64,
    pub grad: Vec<f64>,
}

/// Least-squares objective on already-normalized inputs:
/// `mean_real (D - 1)^2 + mean_fake (D + 1)^2 + (w/2) mean_real |dD/dx|^2`.
pub fn disc_loss(net: &Mlp, real: ArrayView2<f64>, fake: ArrayView2<f64>, gp_weight: f64) -> Result<DiscLoss, AmpError> {
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(AmpError::EmptyBatch);
    }
    let (nr, nf) = (real.nrows() as f64, fake.nrows() as f64);

    let (d_real, mut tape_real) = net.forward(real)?;
    let dy_real = d_real.mapv(|d| 2.0 * (d - 1.0) / nr);
    let mut grad = net.backward(&mut tape_real, dy_real.view())?;

    let (d_fake, mut tape_fake) = net.forward(fake)?;
    let dy_fake = d_fake.mapv(|d| 2.0 * (d + 1.0) / nf);
    for (g, f) in grad.iter_mut().zip(net.backward(&mut tape_fake, dy_fake.view())?) {
        *g += f;
    }

    let real_term = d_real.mapv(|d| (d - 1.0).powi(2)).sum() / nr;
    let fake_term = d_fake.mapv(|d| (d + 1.0).powi(2)).sum() / nf;

    let mut penalty = 0.0;
    if gp_weight != 0.0 {
        let gp = net.gradient_penalty(real, 0.5 * gp_weight / nr)?;
        penalty = gp.value;
        for (g, p) in grad.iter_mut().zip(gp.grad) {
            *g += p;
        }
    }

    Ok(DiscLoss {
        loss: real_term + fake_term + penalty,
        real_mean: d_real.sum() / nr,
        fake_mean: d_fake.sum() / nf,
        penalty,
        grad,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscMetrics {
    pub loss: f64,
    pub real_score: f64,
    pub fake_score: f64,
    pub penalty: f64,
}

/// One optimizer step on a real and a fake minibatch of raw features.
pub fn update_discriminator(
    disc: &mut Discriminator,
    real: ArrayView2<f64>,
    fake: ArrayView2<f64>,
    optimizer: &mut Adam,
) -> Result<DiscMetrics, AmpError> {
    let real_n: Array2<f64> = disc.normalizer.normalize(real);
    let fake_n: Array2<f64> = disc.normalizer.normalize(fake);
    let out = disc_loss(&disc.net, real_n.view(), fake_n.view(), disc.gp_weight)?;
    optimizer.step(disc.net.params_mut(), &out.grad);
    Ok(DiscMetrics { loss: out.loss, real_score: out.real_mean, fake_score: out.fake_mean, penalty: out.penalty })
}
