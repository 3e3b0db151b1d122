//! A small fully connected network: Glorot-uniform initialization, a forward
//! pass, exact reverse-mode gradients and Adam.
//!
//! Hidden layers share one activation; the output layer is linear. Weights
//! are stored `out × in` so a layer maps a batch `b × in` to `b × out` via
//! `h · Wᵀ + b`.

mod adam;
pub mod format;

pub use adam::{Adam, AdamConfig};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, CmiError, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `a` and its image `h`.
    #[inline]
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = CmiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(CmiError::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Parameter gradients, laid out exactly like the layers of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }
}

/// Intermediate values of a forward pass kept for the backward pass.
pub struct ForwardTrace {
    /// `activations[l]` is the input of layer `l`; the last entry is the output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("at least one layer")
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(CmiError::InvalidConfig(format!(
            "a network needs at least an input and an output width, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(CmiError::InvalidConfig(format!(
            "layer widths must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Glorot-uniform weights on `±√(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = seeds::stream(seed, &[]);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-scale..scale));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            activation,
            layers,
        })
    }

    /// A network with every parameter set to zero.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Mlp {
            dims: dims.to_vec(),
            activation,
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    /// Assembles a network from explicit layers, checking the shape chain.
    pub fn from_layers(activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| CmiError::InvalidConfig("network has no layers".into()))?;
        let mut dims = vec![first.weights.ncols()];
        for layer in &layers {
            let (out, inp) = layer.weights.dim();
            if inp != *dims.last().expect("non-empty") {
                return Err(CmiError::DimensionMismatch {
                    context: "layer input width",
                    expected: *dims.last().expect("non-empty"),
                    got: inp,
                });
            }
            if layer.bias.len() != out {
                return Err(CmiError::DimensionMismatch {
                    context: "bias length",
                    expected: out,
                    got: layer.bias.len(),
                });
            }
            dims.push(out);
        }
        validate_dims(&dims)?;
        Ok(Mlp {
            dims,
            activation,
            layers,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(CmiError::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        for (p, v) in self.params_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(CmiError::DimensionMismatch {
                context: "network input width",
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        check_finite(inputs.iter().copied(), "network input")
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&inputs)?;
        let last = self.layers.len() - 1;
        let mut h = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h.dot(&layer.weights.t());
            a += &layer.bias;
            if l < last {
                a.mapv_inplace(|v| self.activation.apply(v));
            }
            h = a;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, inputs: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.check_input(&inputs)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(inputs.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = activations[l].dot(&layer.weights.t());
            a += &layer.bias;
            let h = if l < last {
                a.mapv(|v| self.activation.apply(v))
            } else {
                a.clone()
            };
            pre_activations.push(a);
            activations.push(h);
        }
        Ok(ForwardTrace {
            activations,
            pre_activations,
        })
    }

    /// Gradient of `sum(output ⊙ upstream)` with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace, upstream: ArrayView2<f64>) -> Result<Gradients> {
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(CmiError::DimensionMismatch {
                context: "upstream gradient rows x cols",
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let mut delta = upstream.to_owned();
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let weights = delta.t().dot(&trace.activations[l]);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Layer { weights, bias });
            if l > 0 {
                let mut next = delta.dot(&layer.weights);
                Zip::from(&mut next)
                    .and(&trace.pre_activations[l - 1])
                    .and(&trace.activations[l])
                    .for_each(|d, &a, &h| *d *= self.activation.derivative(a, h));
                delta = next;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn gradient(&self, inputs: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Gradients> {
        let trace = self.forward_trace(inputs)?;
        self.backward(&trace, upstream)
    }
}
