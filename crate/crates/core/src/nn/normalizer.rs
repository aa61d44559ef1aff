use ndarray::{Array2, ArrayView2, Axis};

/// Running per-feature mean and variance (parallel Welford merge).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
    pub frozen: bool,
}

const EPS: f64 = 1e-8;

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm { mean: vec![0.0; dim], var: vec![1.0; dim], count: 0.0, clip: 5.0, frozen: false }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, batch: ArrayView2<f64>) {
        if self.frozen || batch.nrows() == 0 {
            return;
        }
        let n = batch.nrows() as f64;
        let batch_mean = batch.mean_axis(Axis(0)).unwrap();
        let batch_var = batch.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for i in 0..self.dim() {
            let delta = batch_mean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + batch_var[i] * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        let mut out = batch.to_owned();
        for mut row in out.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = ((*v - self.mean[i]) / (self.var[i] + EPS).sqrt()).clamp(-self.clip, self.clip);
            }
        }
        out
    }

    pub fn normalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, v)| ((v - self.mean[i]) / (self.var[i] + EPS).sqrt()).clamp(-self.clip, self.clip))
            .collect()
    }
}
