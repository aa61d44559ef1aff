use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::NnError;

#[inline]
pub fn elu(u: f64) -> f64 {
    if u >= 0.0 {
        u
    } else {
        u.exp_m1()
    }
}

#[inline]
pub fn elu_grad(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        u.exp()
    }
}

#[inline]
fn elu_curvature(u: f64) -> f64 {
    if u >= 0.0 {
        0.0
    } else {
        u.exp()
    }
}

/// Fully connected network with ELU hidden layers and a linear output.
///
/// Parameters live in one flat vector. Layer `k` stores its weight matrix
/// row-major with shape `(dims[k], dims[k + 1])` followed by its bias, so a
/// batch `x` of shape `(n, dims[0])` maps through `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Activations cached by a forward pass.
#[derive(Debug)]
pub struct GradTape {
    cache: Option<TapeCache>,
}

#[derive(Debug)]
struct TapeCache {
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

fn layer_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut at = 0;
    offsets.push(0);
    for pair in dims.windows(2) {
        at += pair[0] * pair[1] + pair[1];
        offsets.push(at);
    }
    offsets
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dimensions");
        Mlp { dims: dims.to_vec(), params: vec![0.0; param_count(dims)], offsets: layer_offsets(dims) }
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let expected = param_count(dims);
        if dims.len() < 2 || params.len() != expected {
            return Err(NnError::DimensionMismatch { expected, got: params.len() });
        }
        Ok(Mlp { dims: dims.to_vec(), params, offsets: layer_offsets(dims) })
    }

    /// Orthogonal initialization with `hidden_gain` on hidden layers and
    /// `output_gain` on the last layer; biases start at zero.
    pub fn orthogonal(dims: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut impl Rng) -> Self {
        let mut mlp = Mlp::zeros(dims);
        let layers = mlp.num_layers();
        for k in 0..layers {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let gain = if k + 1 == layers { output_gain } else { hidden_gain };
            let rows = fan_in.max(fan_out);
            let cols = fan_in.min(fan_out);
            let gauss = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
            let qr = gauss.qr();
            let mut q = qr.q();
            let r = qr.r();
            for c in 0..cols {
                if r[(c, c)] < 0.0 {
                    q.column_mut(c).neg_mut();
                }
            }
            let start = mlp.offsets[k];
            for i in 0..fan_in {
                for j in 0..fan_out {
                    let v = if fan_in >= fan_out { q[(i, j)] } else { q[(j, i)] };
                    mlp.params[start + i * fan_out + j] = gain * v;
                }
            }
        }
        mlp
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    fn weight(&self, k: usize) -> ArrayView2<'_, f64> {
        let (i, o) = (self.dims[k], self.dims[k + 1]);
        let start = self.offsets[k];
        ArrayView2::from_shape((i, o), &self.params[start..start + i * o]).unwrap()
    }

    fn bias(&self, k: usize) -> ArrayView1<'_, f64> {
        let (i, o) = (self.dims[k], self.dims[k + 1]);
        let start = self.offsets[k] + i * o;
        ArrayView1::from(&self.params[start..start + o])
    }

    fn grad_views<'g>(&self, grad: &'g mut [f64], k: usize) -> (ArrayViewMut2<'g, f64>, &'g mut [f64]) {
        let (i, o) = (self.dims[k], self.dims[k + 1]);
        let layer = &mut grad[self.offsets[k]..self.offsets[k + 1]];
        let (w, b) = layer.split_at_mut(i * o);
        (ArrayViewMut2::from_shape((i, o), w).unwrap(), b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    fn affine(&self, k: usize, a: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.weight(k));
        z += &self.bias(k);
        z
    }

    /// Inference without caching.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&x)?;
        let mut a = self.affine(0, &x);
        for k in 1..self.num_layers() {
            a.mapv_inplace(elu);
            a = self.affine(k, &a.view());
        }
        Ok(a)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, GradTape), NnError> {
        self.check_input(&x)?;
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        inputs.push(x.to_owned());
        for k in 0..layers - 1 {
            let z = self.affine(k, &inputs[k].view());
            inputs.push(z.mapv(elu));
            pre.push(z);
        }
        let y = self.affine(layers - 1, &inputs[layers - 1].view());
        Ok((y, GradTape { cache: Some(TapeCache { inputs, pre }) }))
    }

    /// Gradient of `sum(y * dy)` with respect to every parameter. The tape is
    /// consumed.
    pub fn backward(&self, tape: &mut GradTape, dy: ArrayView2<f64>) -> Result<Vec<f64>, NnError> {
        let cache = tape.cache.take().ok_or(NnError::TapeConsumed)?;
        let batch = cache.inputs[0].nrows();
        if dy.ncols() != self.output_dim() || dy.nrows() != batch {
            return Err(NnError::DimensionMismatch { expected: self.output_dim(), got: dy.ncols() });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut dz = dy.to_owned();
        for k in (0..self.num_layers()).rev() {
            {
                let (mut gw, gb) = self.grad_views(&mut grad, k);
                general_mat_mul(1.0, &cache.inputs[k].t(), &dz, 0.0, &mut gw);
                for (b, s) in gb.iter_mut().zip(dz.sum_axis(Axis(0))) {
                    *b = s;
                }
            }
            if k > 0 {
                let mut da = dz.dot(&self.weight(k).t());
                da.zip_mut_with(&cache.pre[k - 1], |d, &z| *d *= elu_grad(z));
                dz = da;
            }
        }
        Ok(grad)
    }

    fn require_scalar(&self) -> Result<(), NnError> {
        if self.output_dim() != 1 {
            return Err(NnError::NonScalarOutput(self.output_dim()));
        }
        Ok(())
    }

    /// Per-row gradient of the scalar output with respect to the input.
    pub fn input_gradient(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.require_scalar()?;
        let (_, tape) = self.forward(x)?;
        let cache = tape.cache.unwrap();
        Ok(self.input_gradient_from(&cache))
    }

    fn input_gradient_from(&self, cache: &TapeCache) -> Array2<f64> {
        let layers = self.num_layers();
        let batch = cache.inputs[0].nrows();
        let last = self.weight(layers - 1);
        let mut da = Array2::from_shape_fn((batch, last.nrows()), |(_, j)| last[(j, 0)]);
        for k in (0..layers - 1).rev() {
            da.zip_mut_with(&cache.pre[k], |d, &z| *d *= elu_grad(z));
            da = da.dot(&self.weight(k).t());
        }
        da
    }

    /// Penalty `sum_i coef * |dD/dx_i|^2` over the batch and its gradient
    /// with respect to the parameters.
    ///
    /// The parameter gradient is `2 coef * d/dtheta [v . dD/dx]` with `v` held
    /// at the input gradient: a directional derivative of the network along
    /// `v` is propagated forward, then differentiated in reverse.
    pub fn gradient_penalty(&self, x: ArrayView2<f64>, coef: f64) -> Result<GradientPenalty, NnError> {
        self.require_scalar()?;
        let (_, tape) = self.forward(x)?;
        let cache = tape.cache.unwrap();
        let layers = self.num_layers();
        let batch = x.nrows();
        let input_grad = self.input_gradient_from(&cache);

        // Directional derivative along the input gradient.
        let mut tangents_in = Vec::with_capacity(layers);
        let mut tangents_pre = Vec::with_capacity(layers - 1);
        tangents_in.push(input_grad.clone());
        for k in 0..layers - 1 {
            let zdot = tangents_in[k].dot(&self.weight(k));
            let mut adot = zdot.clone();
            adot.zip_mut_with(&cache.pre[k], |a, &z| *a *= elu_grad(z));
            tangents_pre.push(zdot);
            tangents_in.push(adot);
        }
        let last = self.weight(layers - 1);
        let ydot = tangents_in[layers - 1].dot(&last);
        let value = coef * ydot.sum();

        let mut grad = vec![0.0; self.params.len()];
        let adj_ydot = Array2::from_elem((batch, 1), 2.0 * coef);
        {
            let (mut gw, _) = self.grad_views(&mut grad, layers - 1);
            general_mat_mul(1.0, &tangents_in[layers - 1].t(), &adj_ydot, 0.0, &mut gw);
        }
        let mut adj_adot = adj_ydot.dot(&last.t());
        let mut adj_a = Array2::<f64>::zeros(adj_adot.raw_dim());
        for k in (0..layers - 1).rev() {
            let pre = &cache.pre[k];
            let mut adj_zdot = adj_adot.clone();
            adj_zdot.zip_mut_with(pre, |v, &z| *v *= elu_grad(z));
            let mut adj_z = adj_a.clone();
            ndarray::Zip::from(&mut adj_z)
                .and(pre)
                .and(&adj_adot)
                .and(&tangents_pre[k])
                .for_each(|out, &z, &aa, &zd| *out = *out * elu_grad(z) + aa * elu_curvature(z) * zd);
            {
                let (mut gw, gb) = self.grad_views(&mut grad, k);
                general_mat_mul(1.0, &tangents_in[k].t(), &adj_zdot, 0.0, &mut gw);
                general_mat_mul(1.0, &cache.inputs[k].t(), &adj_z, 1.0, &mut gw);
                for (b, s) in gb.iter_mut().zip(adj_z.sum_axis(Axis(0))) {
                    *b = s;
                }
            }
            if k > 0 {
                let w = self.weight(k);
                adj_adot = adj_zdot.dot(&w.t());
                adj_a = adj_z.dot(&w.t());
            }
        }
        Ok(GradientPenalty { input_grad, value, grad })
    }
}

#[derive(Clone, Debug)]
pub struct GradientPenalty {
    pub input_grad: Array2<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(dims: &[usize], seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::orthogonal(dims, 1.0, 1.0, &mut rng);
        for p in net.params_mut() {
            *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        net
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]);
        let y = net.predict(random_batch(4, 3, 0).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let net = Mlp::from_params(&[1, 1], vec![2.0, 1.0]).unwrap();
        assert_eq!(net.predict(array![[3.0]].view()).unwrap(), array![[7.0]]);
    }

    #[test]
    fn elu_values() {
        assert!((elu(-1.0) - (-0.632_120_558_8)).abs() < 1e-6);
        assert_eq!(elu(2.0), 2.0);
        assert_eq!(elu_grad(0.0), 1.0);
        assert!((elu_grad(-1e-12) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = Mlp::zeros(&[3, 2]);
        assert_eq!(net.predict(random_batch(1, 4, 0).view()).unwrap_err(), NnError::DimensionMismatch { expected: 3, got: 4 });
    }

    #[test]
    fn tape_is_single_use() {
        let net = random_net(&[2, 3, 1], 0);
        let (_, mut tape) = net.forward(random_batch(2, 2, 1).view()).unwrap();
        let dy = Array2::ones((2, 1));
        net.backward(&mut tape, dy.view()).unwrap();
        assert_eq!(net.backward(&mut tape, dy.view()).unwrap_err(), NnError::TapeConsumed);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = random_net(&[3, 4, 2], 2);
        let (_, mut tape) = net.forward(random_batch(5, 3, 3).view()).unwrap();
        let grad = net.backward(&mut tape, Array2::zeros((5, 2)).view()).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn product_rule_on_scalar_net() {
        let net = Mlp::from_params(&[1, 1], vec![0.7, 0.0]).unwrap();
        let (_, mut tape) = net.forward(array![[2.0]].view()).unwrap();
        let grad = net.backward(&mut tape, array![[1.0]].view()).unwrap();
        assert_eq!(grad, vec![2.0, 1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = random_net(&[4, 6, 5, 3], 7);
        let x = random_batch(3, 4, 8);
        let dy = random_batch(3, 3, 9);
        let loss = |m: &Mlp| (&m.predict(x.view()).unwrap() * &dy).sum();
        let (_, mut tape) = net.forward(x.view()).unwrap();
        let grad = net.backward(&mut tape, dy.view()).unwrap();
        let h = 1e-5;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(rel_err(fd, grad[i]) < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn linear_input_gradient() {
        let net = Mlp::from_params(&[3, 1], vec![0.5, -1.0, 2.0, 0.3]).unwrap();
        let g = net.input_gradient(random_batch(4, 3, 1).view()).unwrap();
        for row in g.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
        let pen = net.gradient_penalty(random_batch(1, 3, 2).view(), 1.0).unwrap();
        assert_eq!(&pen.grad[..3], &[1.0, -2.0, 4.0]);
        assert_eq!(pen.grad[3], 0.0);
        assert!((pen.value - 5.25).abs() < 1e-15);
    }

    #[test]
    fn zero_network_has_no_penalty() {
        let net = Mlp::zeros(&[3, 4, 1]);
        let pen = net.gradient_penalty(random_batch(4, 3, 0).view(), 1.0).unwrap();
        assert!(pen.input_grad.iter().all(|&g| g == 0.0));
        assert_eq!(pen.value, 0.0);
        assert!(pen.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let net = Mlp::zeros(&[3, 2]);
        assert_eq!(net.input_gradient(random_batch(1, 3, 0).view()).unwrap_err(), NnError::NonScalarOutput(2));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = random_net(&[3, 5, 4, 1], 4);
        let x = random_batch(2, 3, 5);
        let g = net.input_gradient(x.view()).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                let fd = (net.predict(xp.view()).unwrap()[(r, 0)] - net.predict(xm.view()).unwrap()[(r, 0)]) / (2.0 * h);
                assert!(rel_err(fd, g[(r, c)]) < 1e-6);
            }
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let net = random_net(&[3, 6, 5, 1], 10);
        let x = random_batch(4, 3, 11);
        let pen = net.gradient_penalty(x.view(), 0.7).unwrap();
        let value = |m: &Mlp| {
            let g = m.input_gradient(x.view()).unwrap();
            0.7 * g.iter().map(|v| v * v).sum::<f64>()
        };
        assert!((value(&net) - pen.value).abs() < 1e-12);
        let h = 1e-5;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            assert!(rel_err(fd, pen.grad[i]) < 1e-3, "param {i}: fd {fd} vs {}", pen.grad[i]);
        }
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::orthogonal(&[6, 4, 9], 2.0, 0.5, &mut rng);
        let w = net.weight(0);
        let gram = w.t().dot(&w);
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 4.0 } else { 0.0 };
                assert!((gram[(i, j)] - expected).abs() < 1e-10);
            }
        }
        assert!(net.bias(1).iter().all(|&b| b == 0.0));
    }
}
