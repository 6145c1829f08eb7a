use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::{axpy, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    /// The relu derivative at exactly 0 is taken as 0.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

/// Fully connected layer `act(W·x + b)` with `W` stored as out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Input after dropout was applied.
    pub input: Vec<f64>,
    /// Per-input multiplier used by dropout (0 or 1/keep); `None` when no dropout ran.
    pub dropout_scale: Option<Vec<f64>>,
    pub pre_activation: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub input: Vec<f64>,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: weights.rows(),
                actual: bias.len(),
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        DenseLayer {
            weights: Matrix::from_vec(outputs, inputs, data).expect("shape"),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    /// Forward pass with inverted dropout on the layer input.
    ///
    /// Dropout only runs when `training` is set and `dropout_rate > 0`; kept
    /// units are divided by the keep probability so inference needs no rescaling.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        dropout_rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, LayerCache)> {
        if input.len() != self.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs(),
                actual: input.len(),
            });
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let (x, dropout_scale) = if training && dropout_rate > 0.0 {
            let keep = 1.0 - dropout_rate;
            let scale: Vec<f64> = (0..input.len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let x = input.iter().zip(&scale).map(|(v, s)| v * s).collect();
            (x, Some(scale))
        } else {
            (input.to_vec(), None)
        };
        let mut pre = self.weights.matvec(&x)?;
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let output: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let cache = LayerCache {
            input: x,
            dropout_scale,
            pre_activation: pre,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Deterministic inference pass (no dropout, no cache).
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs(),
                actual: input.len(),
            });
        }
        let mut out = self.weights.matvec(input)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o = self.activation.apply(*o + b);
        }
        Ok(out)
    }

    pub fn backward(&self, cache: &LayerCache, output_gradient: &[f64]) -> Result<LayerGradients> {
        if output_gradient.len() != self.outputs() || cache.output.len() != self.outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.outputs(),
                actual: output_gradient.len(),
            });
        }
        if cache.input.len() != self.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs(),
                actual: cache.input.len(),
            });
        }
        let delta: Vec<f64> = output_gradient
            .iter()
            .zip(cache.pre_activation.iter().zip(&cache.output))
            .map(|(g, (&z, &y))| g * self.activation.derivative(z, y))
            .collect();
        let mut weights = Matrix::zeros(self.outputs(), self.inputs());
        weights.add_outer(1.0, &delta, &cache.input);
        let mut input = self.weights.transpose_matvec(&delta)?;
        if let Some(scale) = &cache.dropout_scale {
            for (g, s) in input.iter_mut().zip(scale) {
                *g *= s;
            }
        }
        Ok(LayerGradients {
            input,
            weights,
            bias: delta,
        })
    }

    pub fn parameters_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.as_mut_slice(), &mut self.bias]
    }

    pub fn parameters(&self) -> [&[f64]; 2] {
        [self.weights.as_slice(), &self.bias]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

impl LayerGradients {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGradients {
            input: Vec::new(),
            weights: Matrix::zeros(layer.outputs(), layer.inputs()),
            bias: vec![0.0; layer.outputs()],
        }
    }

    /// Accumulates parameter gradients (input gradients are not summed).
    pub fn accumulate(&mut self, other: &LayerGradients) {
        self.weights.add_assign(&other.weights);
        axpy(1.0, &other.bias, &mut self.bias);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.scale(alpha);
        self.bias.iter_mut().for_each(|b| *b *= alpha);
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [self.weights.as_slice(), &self.bias]
    }
}
