use ndarray::{Array2, ArrayView2};

use crate::nn::{GaussianPolicy, Mlp, NnError};

/// Generalized advantage estimation over one environment's trajectory.
///
/// `dones[t]` marks that the episode ended after step `t`; `last_value` is
/// the value of the observation following the final step.
pub fn gae_advantages(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Multiplicative step-size rule around a target divergence.
pub fn adapt_learning_rate(observed_kl: f64, lr: f64, desired_kl: f64) -> f64 {
    let next = if observed_kl > 2.0 * desired_kl {
        lr / 1.5
    } else if observed_kl < 0.5 * desired_kl {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(1e-6, 1e-2)
}

#[derive(Clone, Copy, Debug)]
pub struct PpoMinibatch<'a> {
    pub obs: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoLoss {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Gradient with respect to [`GaussianPolicy::flat_params`].
    pub policy_grad: Vec<f64>,
    pub value_grad: Vec<f64>,
}

/// Clipped surrogate, value regression and entropy bonus with their exact
/// parameter gradients.
pub fn ppo_loss(
    policy: &GaussianPolicy,
    value: &Mlp,
    mb: &PpoMinibatch,
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<PpoLoss, NnError> {
    let n = mb.obs.nrows();
    let nf = n as f64;
    let act_dim = policy.act_dim();
    let (raw_mean, mut tape) = policy.mean.forward(mb.obs)?;
    let std = policy.std();

    let mut d_mean = Array2::<f64>::zeros((n, act_dim));
    let mut d_log_std = vec![0.0; act_dim];
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for i in 0..n {
        let mean: Vec<f64> = (0..act_dim).map(|j| raw_mean[[i, j]] + policy.offset[j]).collect();
        let action = mb.actions.row(i);
        let lp = policy.log_prob(&mean, action.as_slice().expect("contiguous actions"));
        let ratio = (lp - mb.old_log_probs[i]).exp();
        let a = mb.advantages[i];
        let unclipped = ratio * a;
        let clipped_term = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        kl += mb.old_log_probs[i] - lp;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        // The minimum selects the unclipped branch unless clipping bites.
        let (objective, d_lp) = if unclipped <= clipped_term { (unclipped, ratio * a) } else { (clipped_term, 0.0) };
        surrogate -= objective / nf;
        let g = -d_lp / nf;
        if g != 0.0 {
            for j in 0..act_dim {
                let z = (action[j] - mean[j]) / std[j];
                d_mean[[i, j]] = g * z / std[j];
                d_log_std[j] += g * (z * z - 1.0);
            }
        }
    }
    let entropy = policy.entropy();
    for g in &mut d_log_std {
        *g -= entropy_coef;
    }
    let mut policy_grad = policy.mean.backward(&mut tape, d_mean.view())?;
    policy_grad.extend_from_slice(&d_log_std);

    let (v, mut vtape) = value.forward(mb.obs)?;
    let mut value_loss = 0.0;
    let mut dv = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        let e = v[[i, 0]] - mb.returns[i];
        value_loss += e * e / nf;
        dv[[i, 0]] = value_coef * 2.0 * e / nf;
    }
    let value_grad = value.backward(&mut vtape, dv.view())?;

    Ok(PpoLoss {
        surrogate,
        value_loss,
        entropy,
        total: surrogate + value_coef * value_loss - entropy_coef * entropy,
        approx_kl: kl / nf,
        clip_fraction: clipped as f64 / nf,
        policy_grad,
        value_grad,
    })
}

/// Mean of `log pi_old - log pi_new` over a batch.
pub fn approx_kl(policy: &GaussianPolicy, obs: ArrayView2<f64>, actions: ArrayView2<f64>, old_log_probs: &[f64]) -> Result<f64, NnError> {
    let means = policy.means(obs)?;
    let n = obs.nrows();
    let mut kl = 0.0;
    for i in 0..n {
        let lp = policy.log_prob(means.row(i).as_slice().unwrap(), actions.row(i).as_slice().unwrap());
        kl += old_log_probs[i] - lp;
    }
    Ok(kl / n.max(1) as f64)
}

/// Mean analytic KL(old || new) between diagonal Gaussians, given the old
/// means evaluated on the same observations.
pub fn gaussian_kl(old: &GaussianPolicy, old_means: ArrayView2<f64>, new: &GaussianPolicy, obs: ArrayView2<f64>) -> Result<f64, NnError> {
    let means = new.means(obs)?;
    let per_dim: Vec<(f64, f64)> = old
        .log_std
        .iter()
        .zip(&new.log_std)
        .map(|(&lo, &ln)| (ln - lo, (2.0 * lo).exp() / (2.0 * (2.0 * ln).exp())))
        .collect();
    let inv_var: Vec<f64> = new.log_std.iter().map(|&l| 0.5 * (-2.0 * l).exp()).collect();
    let mut kl = 0.0;
    for (mo, mn) in old_means.rows().into_iter().zip(means.rows()) {
        for j in 0..per_dim.len() {
            let d = mo[j] - mn[j];
            kl += per_dim[j].0 + per_dim[j].1 + d * d * inv_var[j] - 0.5;
        }
    }
    Ok(kl / old_means.nrows().max(1) as f64)
}
