use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Gradients, Matrix, Tape, Var};
use crate::math;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(x),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network with a linear output layer.
///
/// Parameters are stored flat, layer by layer: the `n_in × n_out` weight
/// matrix in row-major order followed by the `n_out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionApproximator {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    #[serde(skip)]
    optimizer: Adam,
}

impl FunctionApproximator {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(layer_sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let mut params = Vec::with_capacity(Self::parameter_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let std = 1.0 / math::sqrt(n_in as f64);
            for _ in 0..n_in * n_out {
                let z: f64 = rng.sample(StandardNormal);
                params.push(std * z);
            }
            params.extend(core::iter::repeat_n(0.0, n_out));
        }
        Ok(Self::assemble(layer_sizes, activation, params))
    }

    pub fn from_parameters(
        layer_sizes: &[usize],
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let expected = Self::parameter_count(layer_sizes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "approximator parameters",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self::assemble(layer_sizes, activation, params))
    }

    fn assemble(layer_sizes: &[usize], activation: Activation, params: Vec<f64>) -> Self {
        let optimizer = Adam::new(params.len(), AdamConfig::default());
        Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
            optimizer,
        }
    }

    fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "layer sizes must list at least two positive sizes, got {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    /// Zeroes the output layer's weights (and bias) so the network starts as
    /// the constant zero map.
    pub fn with_zero_output(mut self) -> Self {
        let n = self.layer_sizes.len();
        let (n_in, n_out) = (self.layer_sizes[n - 2], self.layer_sizes[n - 1]);
        let len = (n_in + 1) * n_out;
        let total = self.params.len();
        self.params[total - len..].iter_mut().for_each(|p| *p = 0.0);
        self
    }

    /// `Σ (n_in + 1) · n_out` over consecutive layer pairs.
    pub fn parameter_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn set_optimizer_config(&mut self, config: AdamConfig) {
        self.optimizer.config = config;
    }

    fn layer(&self, idx: usize) -> (Matrix, Matrix) {
        let mut offset = 0;
        for w in self.layer_sizes.windows(2).take(idx) {
            offset += (w[0] + 1) * w[1];
        }
        let (n_in, n_out) = (self.layer_sizes[idx], self.layer_sizes[idx + 1]);
        let w = Matrix::from_vec(n_in, n_out, self.params[offset..offset + n_in * n_out].to_vec());
        let b = Matrix::from_vec(
            1,
            n_out,
            self.params[offset + n_in * n_out..offset + (n_in + 1) * n_out].to_vec(),
        );
        (w, b)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "approximator input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self
            .forward_batch(&Matrix::row_vector(x.to_vec()))?
            .into_vec())
    }

    /// Row-wise forward pass of a `b × input_dim` batch.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "approximator input",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = x.clone();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            h = h.matmul(&w).add_row_broadcast(&b);
            if l + 1 < n_layers {
                h = h.map(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }

    /// Registers the parameters on `tape` as gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundApproximator {
        let layers = (0..self.layer_sizes.len() - 1)
            .map(|l| {
                let (w, b) = self.layer(l);
                (tape.param(w), tape.param(b))
            })
            .collect();
        BoundApproximator {
            layers,
            activation: self.activation,
            n_params: self.params.len(),
        }
    }

    /// Registers the parameters as constants (gradient does not flow into
    /// them, but does flow through them to the inputs).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundApproximator {
        let layers = (0..self.layer_sizes.len() - 1)
            .map(|l| {
                let (w, b) = self.layer(l);
                (tape.constant(w), tape.constant(b))
            })
            .collect();
        BoundApproximator {
            layers,
            activation: self.activation,
            n_params: self.params.len(),
        }
    }

    /// One adaptive-moment update with learning rate `lr`.
    pub fn optimizer_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        self.optimizer.step(&mut self.params, grad, lr)
    }
}

/// An approximator's parameters as tape leaves.
#[derive(Clone, Debug)]
pub struct BoundApproximator {
    layers: Vec<(Var, Var)>,
    activation: Activation,
    n_params: usize,
}

impl BoundApproximator {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
            if l + 1 < n {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        h
    }

    /// Flat gradient in parameter order; unreached parameters get exact
    /// zeros.
    pub fn gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params);
        for &(w, b) in &self.layers {
            out.extend_from_slice(grads.get_or_zeros(w, tape.value(w).shape()).as_slice());
            out.extend_from_slice(grads.get_or_zeros(b, tape.value(b).shape()).as_slice());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    #[test]
    fn parameter_count_matches_layout() {
        let mut rng = stream(1, tag::INIT, 0);
        let f = FunctionApproximator::new(&[5, 7, 3], Activation::Tanh, &mut rng).unwrap();
        assert_eq!(f.parameters().len(), 6 * 7 + 8 * 3);
        assert_eq!(FunctionApproximator::parameter_count(&[5, 7, 3]), 66);
        // biases start at zero
        assert!(f.parameters()[35..42].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn identity_layer() {
        let f = FunctionApproximator::from_parameters(
            &[2, 2],
            Activation::Tanh,
            alloc::vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(f.forward(&[1.0, 2.0]).unwrap(), alloc::vec![1.0, 2.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let n = FunctionApproximator::parameter_count(&[3, 4, 2]);
        let f = FunctionApproximator::from_parameters(&[3, 4, 2], Activation::Relu, alloc::vec![0.0; n])
            .unwrap();
        assert_eq!(f.forward(&[0.3, -9.0, 4.0]).unwrap(), alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = stream(1, tag::INIT, 0);
        let f = FunctionApproximator::new(&[3, 2], Activation::Tanh, &mut rng).unwrap();
        assert!(matches!(
            f.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn hand_rolled_two_layer_forward() {
        let mut rng = stream(42, tag::INIT, 0);
        let f = FunctionApproximator::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let p = f.parameters();
        let x = [0.5, -1.5, 2.0];
        // layer 1: W1 is 3x4 at p[0..12], b1 at p[12..16]
        let mut h = [0.0; 4];
        for j in 0..4 {
            let mut s = p[12 + j];
            for i in 0..3 {
                s += x[i] * p[i * 4 + j];
            }
            h[j] = s.tanh();
        }
        // layer 2: W2 is 4x2 at p[16..24], b2 at p[24..26]
        let mut y = [0.0; 2];
        for j in 0..2 {
            let mut s = p[24 + j];
            for i in 0..4 {
                s += h[i] * p[16 + i * 2 + j];
            }
            y[j] = s;
        }
        let out = f.forward(&x).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_layer() {
        let mut rng = stream(3, tag::INIT, 0);
        let f = FunctionApproximator::new(&[4, 8, 1], Activation::Relu, &mut rng)
            .unwrap()
            .with_zero_output();
        assert_eq!(f.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), alloc::vec![0.0]);
    }
}
