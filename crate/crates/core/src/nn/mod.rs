//! Minimal dense-network machinery: forward with a gradient tape, exact
//! backward, Glorot-uniform init, and an Adam optimizer.
//!
//! Everything is `f64` and allocation-honest: no views, no broadcasting, just
//! row-major weight vectors sized `out_dim * in_dim`. The networks here are
//! small (tens of units wide) and batch parallelism lives a level up, so the
//! straightforward loops are fast enough and easy to differentiate by hand.
//! Backward passes are verified against finite differences in the test suite.

pub mod adam;
pub mod gaussian;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has {got} values, layer expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("output gradient has {got} values, net produces {expected}")]
    OutputDim { expected: usize, got: usize },
    #[error("numeric overflow in layer {layer} forward pass")]
    NonFinite { layer: usize },
    #[error("tape was recorded by a differently shaped net")]
    TapeMismatch,
    #[error("gradient for {tensor} has {got} values, parameter has {expected}")]
    GradDim {
        tensor: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient for {tensor}")]
    NonFiniteGradient { tensor: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre_act: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre_act > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer. Weights are row-major: `weights[i * in_dim + j]` is the
/// coefficient of input `j` in output `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> DenseLayer {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn pre_activation(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.out_dim {
            let row = &self.weights[i * self.in_dim..(i + 1) * self.in_dim];
            let mut acc = self.bias[i];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Activations recorded during one forward pass, consumed by
/// [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input seen by each layer; `inputs[0]` is the net input.
    inputs: Vec<Vec<f64>>,
    /// Affine output of each layer, before the activation.
    pre_acts: Vec<Vec<f64>>,
    /// Layer shapes, to reject tapes recorded by a different net.
    dims: Vec<(usize, usize)>,
}

/// Per-tensor gradients matching a [`DenseNet`]'s layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> NetGrads {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weights: vec![0.0; l.weights.len()],
                    d_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.d_weights.iter_mut().zip(&b.d_weights) {
                *x += y;
            }
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for x in &mut layer.d_weights {
                *x *= factor;
            }
            for x in &mut layer.d_bias {
                *x *= factor;
            }
        }
    }
}

/// A feed-forward stack of [`DenseLayer`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

impl DenseNet {
    /// Builds a net with the given layer widths (`dims[0]` inputs through
    /// `dims.last()` outputs), ReLU on hidden layers and a linear output.
    /// Weights are Glorot-uniform, biases zero.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> DenseNet {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let activation = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::glorot(w[0], w[1], activation, rng)
            })
            .collect();
        DenseNet { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    /// Runs the net, recording a tape for [`DenseNet::backward`]. Fails with
    /// [`NnError::NonFinite`] if any pre-activation overflows, before the
    /// ReLU can mask the damage.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        if input.len() != self.in_dim() {
            return Err(NnError::InputDim {
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_acts: Vec::with_capacity(self.layers.len()),
            dims: self.dims(),
        };
        let mut current = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(layer.out_dim);
            layer.pre_activation(&current, &mut pre);
            if pre.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: li });
            }
            let out = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            tape.inputs.push(std::mem::replace(&mut current, out));
            tape.pre_acts.push(pre);
        }
        Ok((current, tape))
    }

    /// Backpropagates `out_grad` through the pass recorded on `tape`,
    /// returning parameter gradients and the gradient w.r.t. the net input.
    pub fn backward(&self, tape: &Tape, out_grad: &[f64]) -> Result<(NetGrads, Vec<f64>), NnError> {
        if tape.dims != self.dims() {
            return Err(NnError::TapeMismatch);
        }
        if out_grad.len() != self.out_dim() {
            return Err(NnError::OutputDim {
                expected: self.out_dim(),
                got: out_grad.len(),
            });
        }
        let mut grads = NetGrads::zeros_like(self);
        let mut d_out = out_grad.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre_acts[li];
            let input = &tape.inputs[li];
            let layer_grads = &mut grads.layers[li];
            let mut d_input = vec![0.0; layer.in_dim];
            for i in 0..layer.out_dim {
                let d_pre = d_out[i] * layer.activation.derivative(pre[i]);
                layer_grads.d_bias[i] = d_pre;
                let row = i * layer.in_dim;
                for j in 0..layer.in_dim {
                    layer_grads.d_weights[row + j] = d_pre * input[j];
                    d_input[j] += layer.weights[row + j] * d_pre;
                }
            }
            d_out = d_input;
        }
        Ok((grads, d_out))
    }

    /// Pairs each parameter tensor with its gradient under stable names
    /// (`{prefix}.layer{i}.w`, `{prefix}.layer{i}.b`), ready for
    /// [`adam::AdamState::step`].
    pub fn updates<'a>(
        &'a mut self,
        prefix: &str,
        grads: &'a NetGrads,
    ) -> Vec<adam::AdamUpdate<'a>> {
        debug_assert_eq!(self.layers.len(), grads.layers.len());
        self.layers
            .iter_mut()
            .zip(&grads.layers)
            .enumerate()
            .flat_map(|(i, (layer, g))| {
                [
                    adam::AdamUpdate {
                        name: format!("{prefix}.layer{i}.w"),
                        param: &mut layer.weights,
                        grad: &g.d_weights,
                    },
                    adam::AdamUpdate {
                        name: format!("{prefix}.layer{i}.b"),
                        param: &mut layer.bias,
                        grad: &g.d_bias,
                    },
                ]
            })
            .collect()
    }
}
