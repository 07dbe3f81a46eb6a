//! Dense 64-bit matrices, a fixed-topology MLP with exact reverse-mode
//! gradients, first-order update rules and a finite-difference oracle.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
}

fn check(op: &'static str, expected: usize, found: usize) -> Result<(), TensorError> {
    if expected == found {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            expected,
            found,
        })
    }
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        check("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check("Matrix::from_rows", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        check("matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        check("t_matmul", self.rows, other.rows)?;
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        check("matmul_t", self.cols, other.cols)?;
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a_row.iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

/// One affine layer. `weight` is `in × out` so that a batch maps as `X·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameters of a multilayer perceptron: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type GradientSet = MlpParams;

/// Activations recorded by [`MlpParams::forward`]: the input of every layer.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs: Vec<Matrix>,
}

impl MlpParams {
    /// Layer widths `[in, h1, ..., out]`. Weights are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Matrix {
                        rows: fan_in,
                        cols: fan_out,
                        data,
                    },
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.sizes())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            sizes.push(first.weight.rows);
        }
        sizes.extend(self.layers.iter().map(|l| l.weight.cols));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    /// Appends the parameters to `out`: per layer, the weight in row-major
    /// order followed by the bias.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
    }

    /// `(rows, cols)` of every tensor in [`write_flat`](Self::write_flat)
    /// order; a bias is a single row.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [(l.weight.rows, l.weight.cols), (1, l.bias.len())])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_flat(&mut out);
        out
    }

    /// Inverse of [`write_flat`](Self::write_flat); `flat` must hold exactly
    /// [`num_params`](Self::num_params) values.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        check("MlpParams::load_flat", self.num_params(), flat.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.data.len();
            l.weight.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache), TensorError> {
        check("mlp_forward", self.input_dim(), inputs.cols)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut current = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weight)?;
            for r in 0..z.rows {
                for (v, b) in z.data[r * z.cols..(r + 1) * z.cols].iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if i != last {
                for v in &mut z.data {
                    *v = libm::tanh(*v);
                }
            }
            layer_inputs.push(core::mem::replace(&mut current, z));
        }
        Ok((current, ForwardCache { layer_inputs }))
    }

    /// Forward pass without keeping the activation record.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix, TensorError> {
        self.forward(inputs).map(|(out, _)| out)
    }

    /// Gradient of `sum(outputs ⊙ upstream)` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<GradientSet, TensorError> {
        check("mlp_backward", self.layers.len(), cache.layer_inputs.len())?;
        check("mlp_backward", self.output_dim(), upstream.cols)?;
        check("mlp_backward", cache.layer_inputs[0].rows, upstream.rows)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.layer_inputs[i];
            let weight = input.t_matmul(&delta)?;
            let mut bias = vec![0.0; delta.cols];
            for r in 0..delta.rows {
                for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            if i > 0 {
                let mut prev = delta.matmul_t(&layer.weight)?;
                // input of layer i is tanh output of layer i-1
                for (p, a) in prev.data.iter_mut().zip(&input.data) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok(MlpParams { layers: grads })
    }
}

/// `θ′ = θ − stepsize·g`
pub fn sgd_step(params: &[f64], grads: &[f64], stepsize: f64) -> Result<Vec<f64>, TensorError> {
    check("sgd_step", params.len(), grads.len())?;
    Ok(params
        .iter()
        .zip(grads)
        .map(|(p, g)| p - stepsize * g)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub stepsize: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2_coeff: f64,
}

impl AdamConfig {
    pub fn new(stepsize: f64) -> Self {
        Self {
            stepsize,
            ..Self::default()
        }
    }

    /// Settings used by evolution strategies: stepsize 0.01, L2 0.005.
    pub fn evolution_strategies() -> Self {
        Self {
            stepsize: 0.01,
            l2_coeff: 0.005,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            stepsize: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2_coeff: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam. `l2_coeff·θ` is added to the gradient before the
/// moment updates.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(Vec<f64>, AdamState), TensorError> {
    check("adam_step", params.len(), grads.len())?;
    check("adam_step", params.len(), state.m.len())?;
    check("adam_step", params.len(), state.v.len())?;
    let t = state.t + 1;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let mut out = Vec::with_capacity(params.len());
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g = grads[i] + cfg.l2_coeff * params[i];
        let mi = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        out.push(params[i] - cfg.stepsize * m_hat / (libm::sqrt(v_hat) + cfg.epsilon));
        m.push(mi);
        v.push(vi);
    }
    Ok((out, AdamState { m, v, t }))
}

/// Central differences of `loss` around `params`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], epsilon: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(epsilon > 0.0, "finite difference step must be positive");
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + epsilon;
            let up = loss(&probe);
            probe[i] = orig - epsilon;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * epsilon)
        })
        .collect()
}

/// Largest `|a−b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| libm::fabs(x - y) / libm::fabs(*x).max(libm::fabs(*y)).max(floor))
        .fold(0.0, f64::max)
}

/// Numerically stabilized log-softmax of one row of logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
    let log_z = max + libm::log(sum);
    logits.iter().map(|l| l - log_z).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(libm::exp).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from the distribution `probs` (assumed normalized).
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Huber loss and its derivative for residual `x`.
pub fn huber(x: f64, delta: f64) -> (f64, f64) {
    if libm::fabs(x) <= delta {
        (0.5 * x * x, x)
    } else {
        (delta * (libm::fabs(x) - 0.5 * delta), delta * libm::copysign(1.0, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn linear(w: f64, b: f64) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                weight: Matrix::from_vec(1, 1, vec![w]).unwrap(),
                bias: vec![b],
            }],
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = MlpParams::zeros(&[3, 4, 2]);
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]]).unwrap();
        let y = net.predict(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer() {
        let y = linear(2.0, 1.0).predict(&Matrix::from_rows(&[[3.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn two_layer_matches_scalar_composition() {
        let mut rng = seeded(11);
        let net = MlpParams::new(&[2, 3, 1], &mut rng);
        let x = [0.3, -0.7];
        let y = net.predict(&Matrix::from_rows(&[x]).unwrap()).unwrap();
        let (l0, l1) = (&net.layers[0], &net.layers[1]);
        let mut expected = l1.bias[0];
        for j in 0..3 {
            let mut z = l0.bias[j];
            for i in 0..2 {
                z += x[i] * l0.weight.get(i, j);
            }
            expected += z.tanh() * l1.weight.get(j, 0);
        }
        assert!((y.get(0, 0) - expected).abs() < 1e-14);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = MlpParams::zeros(&[3, 2]);
        let err = net.forward(&Matrix::zeros(1, 4)).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { expected: 3, found: 4, .. }));
    }

    #[test]
    fn linear_backward_is_input() {
        let net = linear(0.7, 0.0);
        let x = Matrix::from_rows(&[[2.5]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(g.layers[0].weight.data(), &[2.5]);
        assert_eq!(g.layers[0].bias, vec![1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = MlpParams::new(&[3, 5, 2], &mut seeded(2));
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let net = MlpParams::new(&[3, 4, 2], &mut seeded(5));
        let flat = net.flatten();
        let mut other = net.zeros_like();
        other.load_flat(&flat).unwrap();
        assert_eq!(other, net);
        assert!(other.load_flat(&flat[1..]).is_err());
    }

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(&[1.0], &[2.0], 0.5).unwrap(), vec![0.0]);
        assert_eq!(sgd_step(&[1.5, -2.0], &[9.0, 3.0], 0.0).unwrap(), vec![1.5, -2.0]);
        assert!(sgd_step(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn sgd_composes_additively() {
        let theta = [0.25, -1.0, 3.0];
        let (g1, g2) = ([0.5, 0.125, -2.0], [1.0, -0.25, 0.5]);
        let twice = sgd_step(&sgd_step(&theta, &g1, 0.5).unwrap(), &g2, 0.5).unwrap();
        let summed: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let once = sgd_step(&theta, &summed, 0.5).unwrap();
        for (a, b) in twice.iter().zip(&once) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let state = AdamState::new(2);
        let (p, s) = adam_step(&[1.0, -2.0], &[0.0, 0.0], &state, &AdamConfig::new(0.01)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = 0.5;
        let (p, _) = adam_step(&[0.0], &[g], &AdamState::new(1), &AdamConfig::new(0.01)).unwrap();
        // t=1: m_hat = g, v_hat = g^2
        let expected = -0.01 * g / (g + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_l2_pulls_towards_zero() {
        let cfg = AdamConfig::evolution_strategies();
        assert_eq!((cfg.stepsize, cfg.l2_coeff), (0.01, 0.005));
        let (p, _) = adam_step(&[2.0], &[0.0], &AdamState::new(1), &cfg).unwrap();
        assert!(p[0] < 2.0);
    }

    #[test]
    fn adam_is_pure() {
        let state = AdamState {
            m: vec![0.1, 0.2],
            v: vec![0.3, 0.4],
            t: 7,
        };
        let cfg = AdamConfig::new(0.02);
        let a = adam_step(&[0.5, 0.6], &[0.7, -0.8], &state, &cfg).unwrap();
        let b = adam_step(&[0.5, 0.6], &[0.7, -0.8], &state, &cfg).unwrap();
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax(&[1000.0, 1000.0]);
        assert!((l[0] - libm::log(0.5)).abs() < 1e-12);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5, 1.0), (0.125, 0.5));
        assert_eq!(huber(-3.0, 1.0), (2.5, -1.0));
    }
}
