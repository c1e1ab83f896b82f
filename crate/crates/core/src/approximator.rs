//! Fully connected actor and critic networks over a flat parameter vector.
//!
//! Every network is described by a [`NetworkSpec`] and evaluated against a
//! [`ParamVector`]. Keeping the weights flat lets the evolution strategy
//! perturb a whole network with a single Gaussian draw and lets the learner
//! hand its actor to the population without any conversion.
//!
//! Layout: layers are stored in order, each as a row-major `out x in` weight
//! matrix followed by its `out` biases.

use std::ops::{Deref, DerefMut};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variance floor used by the fixed (non-learned) layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Identity,
}

/// Shape and activation description of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    /// Normalize each hidden pre-activation (no learned scale or shift).
    pub layer_norm: bool,
}

impl NetworkSpec {
    /// Policy network: state in, tanh-squashed action out, layer norm on.
    pub fn actor(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Self {
        Self {
            input_dim: state_dim,
            hidden_dims: hidden.to_vec(),
            output_dim: action_dim,
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Tanh,
            layer_norm: true,
        }
    }

    /// Action-value network over the concatenation `[state, action]`.
    pub fn critic(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Self {
        Self {
            input_dim: state_dim + action_dim,
            hidden_dims: hidden.to_vec(),
            output_dim: 1,
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Identity,
            layer_norm: false,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NetError::InvalidSpec(
                "input and output dimensions must be at least 1".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(NetError::InvalidSpec(
                "hidden layer widths must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| fan_out * fan_in + fan_out)
            .sum()
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_out * fan_in + fan_out) {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        ParamVector(values)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector(vec![0.0; self.param_count()])
    }

    /// Splits a flat vector into per-layer `(weights, bias)` arrays.
    pub fn unflatten(&self, params: &[f64]) -> Result<Vec<LayerParams>, NetError> {
        self.check_params(params)?;
        let mut offset = 0;
        let mut layers = Vec::new();
        for (fan_in, fan_out) in self.layer_shapes() {
            let w = &params[offset..offset + fan_out * fan_in];
            offset += fan_out * fan_in;
            let b = &params[offset..offset + fan_out];
            offset += fan_out;
            layers.push(LayerParams {
                weights: Array2::from_shape_vec((fan_out, fan_in), w.to_vec())
                    .expect("layer slice has matching length"),
                bias: Array1::from(b.to_vec()),
            });
        }
        Ok(layers)
    }

    pub fn flatten(&self, layers: &[LayerParams]) -> Result<ParamVector, NetError> {
        let shapes = self.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(NetError::Dimension {
                what: "layer count",
                expected: shapes.len(),
                got: layers.len(),
            });
        }
        let mut values = Vec::with_capacity(self.param_count());
        for (layer, (fan_in, fan_out)) in layers.iter().zip(shapes) {
            if layer.weights.dim() != (fan_out, fan_in) || layer.bias.len() != fan_out {
                return Err(NetError::InvalidSpec(format!(
                    "layer shape {:?} does not match ({fan_out}, {fan_in})",
                    layer.weights.dim()
                )));
            }
            values.extend(layer.weights.iter().copied());
            values.extend(layer.bias.iter().copied());
        }
        Ok(ParamVector(values))
    }

    fn check_params(&self, params: &[f64]) -> Result<(), NetError> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(NetError::Dimension {
                what: "parameter vector",
                expected,
                got: params.len(),
            });
        }
        Ok(())
    }

    fn layer_views<'a>(&self, params: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let mut offset = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let w = ArrayView2::from_shape((fan_out, fan_in), &params[offset..offset + fan_out * fan_in])
                    .expect("layer slice has matching length");
                offset += fan_out * fan_in;
                let b = ArrayView1::from(&params[offset..offset + fan_out]);
                offset += fan_out;
                (w, b)
            })
            .collect()
    }

    /// Evaluates the network on a single input vector.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>, NetError> {
        let batch = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(params, batch)?.into_raw_vec_and_offset().0)
    }

    /// Gradient of `upstream . output` with respect to the parameters and the input.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        upstream: &[f64],
    ) -> Result<(Gradient, Vec<f64>), NetError> {
        let batch = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let cache = self.forward_cached(params, batch)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row view");
        let (grad, input_grad) = self.backward_batch(params, &cache, up)?;
        Ok((grad, input_grad.into_raw_vec_and_offset().0))
    }

    /// Row-wise evaluation of a `batch x input_dim` matrix.
    pub fn forward_batch(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>, NetError> {
        Ok(self.forward_cached(params, inputs)?.output)
    }

    /// Forward pass that keeps the intermediate activations needed by
    /// [`NetworkSpec::backward_batch`].
    pub fn forward_cached(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
    ) -> Result<ForwardCache, NetError> {
        self.check_params(params)?;
        if inputs.ncols() != self.input_dim {
            return Err(NetError::Dimension {
                what: "network input",
                expected: self.input_dim,
                got: inputs.ncols(),
            });
        }
        let layers = self.layer_views(params);
        let (last, hidden) = layers.split_last().expect("at least one layer");
        let mut hidden_caches = Vec::with_capacity(hidden.len());
        let mut x = inputs.to_owned();
        for (w, b) in hidden {
            let mut z = x.dot(&w.t());
            z += b;
            let inv_std = if self.layer_norm {
                Some(layer_norm_in_place(&mut z))
            } else {
                None
            };
            let h = z.mapv(|v| v.max(0.0));
            hidden_caches.push(HiddenCache {
                input: x,
                normalized: z,
                inv_std,
            });
            x = h;
        }
        let (w, b) = last;
        let mut z = x.dot(&w.t());
        z += b;
        if self.output_activation == OutputActivation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
        Ok(ForwardCache {
            hidden: hidden_caches,
            last_input: x,
            output: z,
        })
    }

    /// Backpropagates `upstream` (`batch x output_dim`) through a cached
    /// forward pass. The parameter gradient is summed over the batch rows.
    pub fn backward_batch(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Gradient, Array2<f64>), NetError> {
        self.check_params(params)?;
        if upstream.ncols() != self.output_dim || upstream.nrows() != cache.output.nrows() {
            return Err(NetError::Dimension {
                what: "upstream gradient",
                expected: self.output_dim,
                got: upstream.ncols(),
            });
        }
        let layers = self.layer_views(params);
        let shapes = self.layer_shapes();
        let mut grad = vec![0.0; self.param_count()];
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &shapes {
            offsets.push(offset);
            offset += fan_out * fan_in + fan_out;
        }

        let mut dz = upstream.to_owned();
        if self.output_activation == OutputActivation::Tanh {
            dz.zip_mut_with(&cache.output, |d, &y| *d *= 1.0 - y * y);
        }
        let n_layers = layers.len();
        let mut x_in = &cache.last_input;
        for li in (0..n_layers).rev() {
            let (w, _) = &layers[li];
            let (fan_in, fan_out) = shapes[li];
            let off = offsets[li];
            let dw = dz.t().dot(x_in);
            grad[off..off + fan_out * fan_in]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            let db = dz.sum_axis(Axis(0));
            grad[off + fan_out * fan_in..off + fan_out * fan_in + fan_out]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, v)| *g = *v);
            let dx = dz.dot(w);
            if li == 0 {
                return Ok((Gradient(grad), dx));
            }
            // Back through the previous hidden layer's activation and normalization.
            let hc = &cache.hidden[li - 1];
            let mut dn = dx;
            dn.zip_mut_with(&hc.normalized, |d, &n| {
                if n <= 0.0 {
                    *d = 0.0
                }
            });
            if let Some(inv_std) = &hc.inv_std {
                layer_norm_backward_in_place(&mut dn, &hc.normalized, inv_std);
            }
            dz = dn;
            x_in = &hc.input;
        }
        unreachable!("network has at least one layer")
    }
}

/// Normalizes each row to zero mean and unit variance; returns `1/std` per row.
fn layer_norm_in_place(z: &mut Array2<f64>) -> Array1<f64> {
    let width = z.ncols() as f64;
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, s) in z.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        *s = inv;
    }
    inv_std
}

fn layer_norm_backward_in_place(dn: &mut Array2<f64>, normalized: &Array2<f64>, inv_std: &Array1<f64>) {
    let width = dn.ncols() as f64;
    for ((mut d_row, n_row), &inv) in dn
        .rows_mut()
        .into_iter()
        .zip(normalized.rows())
        .zip(inv_std.iter())
    {
        let mean_d = d_row.sum() / width;
        let mean_dn = d_row.iter().zip(n_row.iter()).map(|(d, n)| d * n).sum::<f64>() / width;
        d_row.zip_mut_with(&n_row, |d, &n| *d = inv * (*d - mean_d - n * mean_dn));
    }
}

#[derive(Debug, Clone)]
struct HiddenCache {
    input: Array2<f64>,
    /// Normalized pre-activation (plain pre-activation without layer norm).
    normalized: Array2<f64>,
    inv_std: Option<Array1<f64>>,
}

/// Intermediate values of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All weights of one network, in [`NetworkSpec`] layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Derivative aligned element-wise with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Deref for Gradient {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Gradient {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Gradient {
    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates of Adam for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

fn check_grad(params: &[f64], grad: &[f64]) -> Result<(), NetError> {
    if grad.len() != params.len() {
        return Err(NetError::Dimension {
            what: "gradient",
            expected: params.len(),
            got: grad.len(),
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(NetError::NonFinite {
            what: "gradient",
            index,
        });
    }
    Ok(())
}

/// One bias-corrected Adam descent step (`params -= lr * m_hat / (sqrt(v_hat) + eps)`).
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NetError> {
    check_grad(params, grad)?;
    if state.m.len() != params.len() {
        return Err(NetError::Dimension {
            what: "optimizer moments",
            expected: params.len(),
            got: state.m.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Plain gradient descent, `params -= lr * grad`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<(), NetError> {
    check_grad(params, grad)?;
    params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line re-implementation with explicit loops over the flat layout.
    fn naive_forward(spec: &NetworkSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut offset = 0;
        let shapes = spec.layer_shapes();
        for (li, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut acc = 0.0;
                for i in 0..fan_in {
                    acc += params[offset + o * fan_in + i] * x[i];
                }
                z[o] = acc + params[offset + fan_out * fan_in + o];
            }
            offset += fan_out * fan_in + fan_out;
            if li + 1 == shapes.len() {
                if spec.output_activation == OutputActivation::Tanh {
                    for v in &mut z {
                        *v = v.tanh();
                    }
                }
                return z;
            }
            if spec.layer_norm {
                let mean: f64 = z.iter().sum::<f64>() / fan_out as f64;
                let var: f64 = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fan_out as f64;
                for v in &mut z {
                    *v = (*v - mean) / (var + LAYER_NORM_EPS).sqrt();
                }
            }
            x = z.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
        }
        unreachable!()
    }

    fn random_spec(rng: &mut ChaCha8Rng, layer_norm: bool, tanh: bool) -> NetworkSpec {
        let depth = rng.random_range(0..3);
        NetworkSpec {
            input_dim: rng.random_range(1..6),
            hidden_dims: (0..depth).map(|_| rng.random_range(2..7)).collect(),
            output_dim: rng.random_range(1..4),
            hidden_activation: HiddenActivation::Relu,
            output_activation: if tanh {
                OutputActivation::Tanh
            } else {
                OutputActivation::Identity
            },
            layer_norm,
        }
    }

    #[test]
    fn zero_params_give_zero_tanh_output() {
        let spec = NetworkSpec::actor(3, 2, &[8, 8]);
        let out = spec.forward(&spec.zeros(), &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..40 {
            let spec = random_spec(&mut rng, case % 2 == 0, case % 3 != 0);
            let params = spec.init_params(&mut rng);
            let input: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = spec.forward(&params, &input).unwrap();
            let slow = naive_forward(&spec, &params, &input);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_rows_match_single_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = NetworkSpec::actor(4, 2, &[5, 5]);
        let params = spec.init_params(&mut rng);
        let inputs = Array2::from_shape_fn((6, 4), |(r, c)| (r as f64 - 2.5) * 0.3 + c as f64 * 0.1);
        let batch = spec.forward_batch(&params, inputs.view()).unwrap();
        for (r, row) in inputs.rows().into_iter().enumerate() {
            let single = spec.forward(&params, row.as_slice().unwrap()).unwrap();
            assert_eq!(batch.row(r).to_vec(), single);
        }
    }

    #[test]
    fn linear_scalar_backward() {
        let spec = NetworkSpec {
            input_dim: 1,
            hidden_dims: vec![],
            output_dim: 1,
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Identity,
            layer_norm: false,
        };
        let (grad, input_grad) = spec.backward(&[1.5, 0.0], &[0.7], &[1.0]).unwrap();
        assert_eq!(grad.0, vec![0.7, 1.0]);
        assert_eq!(input_grad, vec![1.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NetworkSpec::actor(3, 2, &[4, 4]);
        let params = spec.init_params(&mut rng);
        let (grad, input_grad) = spec.backward(&params, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(input_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-5;
        for case in 0..30 {
            let spec = random_spec(&mut rng, case % 2 == 0, case % 2 == 0);
            let params = spec.init_params(&mut rng);
            let input: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..spec.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let objective = |p: &[f64], x: &[f64]| -> f64 {
                naive_forward(&spec, p, x).iter().zip(&upstream).map(|(o, u)| o * u).sum()
            };
            let (grad, input_grad) = spec.backward(&params, &input, &upstream).unwrap();
            for i in 0..params.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (objective(&plus, &input) - objective(&minus, &input)) / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(grad[i].abs()).max(1e-3);
                assert!((fd - grad[i]).abs() <= tol, "case {case} param {i}: fd {fd} vs {}", grad[i]);
            }
            for i in 0..input.len() {
                let mut plus = input.clone();
                let mut minus = input.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (objective(&params, &plus) - objective(&params, &minus)) / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(input_grad[i].abs()).max(1e-3);
                assert!((fd - input_grad[i]).abs() <= tol);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = NetworkSpec::critic(3, 1, &[4]);
        let params = spec.zeros();
        assert!(matches!(
            spec.forward(&params, &[1.0, 2.0]),
            Err(NetError::Dimension { .. })
        ));
        assert!(spec.forward(&params[1..], &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(spec.backward(&params, &[1.0; 4], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = NetworkSpec::actor(2, 1, &[4, 0]);
        assert!(spec.validate().is_err());
        spec.hidden_dims = vec![4];
        assert!(spec.validate().is_ok());
        spec.output_dim = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut params = vec![0.5, -1.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &[0.0, 0.0], &mut state, 3e-4).unwrap();
        assert_eq!(params, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m = 0.1 g, v = 0.001 g^2; bias correction gives m_hat = g, v_hat = g^2,
        // so the step is lr * g / (|g| + eps).
        let g = 2.0;
        let lr = 3e-4;
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[g], &mut state, lr).unwrap();
        let expected = 1.0 - lr * g / (g + 1e-8);
        assert!((params[0] - expected).abs() < 1e-15);
        assert!((state.m[0] - 0.2).abs() < 1e-15);
        assert!((state.v[0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut params = vec![0.0, 0.0];
        let mut state = AdamState::new(2);
        let err = adam_step(&mut params, &[0.0, f64::NAN], &mut state, 1e-3).unwrap_err();
        assert_eq!(err, NetError::NonFinite { what: "gradient", index: 1 });
    }
}
