use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Mlp, NnError};

/// Diagonal Gaussian over joint targets with a state-independent standard
/// deviation.
///
/// The mean is `offset + mlp(obs)`; the offset is a fixed nominal pose so a
/// freshly initialized network (small output gain) commands that pose.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
    pub offset: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, hidden: &[usize], offset: Vec<f64>, init_std: f64, rng: &mut impl Rng) -> Self {
        let act_dim = offset.len();
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(act_dim);
        GaussianPolicy {
            mean: Mlp::orthogonal(&dims, 2f64.sqrt(), 0.01, rng),
            log_std: vec![init_std.ln(); act_dim],
            offset,
        }
    }

    pub fn act_dim(&self) -> usize {
        self.offset.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Action means for a batch of (normalized) observations.
    pub fn means(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let mut out = self.mean.predict(obs)?;
        for mut row in out.rows_mut() {
            for (v, o) in row.iter_mut().zip(&self.offset) {
                *v += o;
            }
        }
        Ok(out)
    }

    pub fn sample(&self, mean: &[f64], rng: &mut impl Rng) -> (Vec<f64>, f64) {
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = self.log_prob(mean, &action);
        (action, lp)
    }

    pub fn sample_action(&self, obs: &[f64], rng: &mut impl Rng) -> Result<(Vec<f64>, f64), NnError> {
        let obs = ArrayView2::from_shape((1, obs.len()), obs).map_err(|_| NnError::DimensionMismatch { expected: self.obs_dim(), got: obs.len() })?;
        let mean = self.means(obs)?;
        Ok(self.sample(mean.row(0).as_slice().unwrap(), rng))
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), l)| {
                let z = (a - m) / l.exp();
                -0.5 * z * z - l - 0.5 * (2.0 * PI).ln()
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| 0.5 * (2.0 * PI * std::f64::consts::E).ln() + l).sum()
    }

    /// Flat parameters: mean network followed by the log standard deviations.
    pub fn num_params(&self) -> usize {
        self.mean.num_params() + self.log_std.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.mean.params().to_vec();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        let n = self.mean.num_params();
        self.mean.params_mut().copy_from_slice(&params[..n]);
        self.log_std.copy_from_slice(&params[n..]);
    }
}
