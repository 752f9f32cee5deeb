//! Fully connected networks with hand-derived backpropagation.
//!
//! Parameters live in one flat buffer, layer by layer: the row-major weight
//! matrix (`out x in`) followed by the bias vector. Optimizers and
//! checkpoints operate on that buffer directly.

use crate::error::{check_len, Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-sample activations recorded by [`Mlp::forward_tape`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// Gradients of `dot(output, upstream)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn layer_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut at = 0;
    for w in dims.windows(2) {
        offsets.push(at);
        at += w[0] * w[1] + w[1];
    }
    offsets.push(at);
    offsets
}

impl Mlp {
    /// Zero-initialized network. `hidden` applies to every hidden layer; the
    /// output layer is linear.
    pub fn zeros(dims: &[usize], hidden: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "layer dims must list at least two positive sizes, got {dims:?}"
            )));
        }
        let mut activations = vec![hidden; dims.len() - 2];
        activations.push(Activation::Identity);
        let offsets = layer_offsets(dims);
        Ok(Self {
            dims: dims.to_vec(),
            activations,
            params: vec![0.0; *offsets.last().unwrap()],
            offsets,
        })
    }

    /// Glorot-uniform weights (He-uniform for ReLU layers), zero biases.
    pub fn init(dims: &[usize], hidden: Activation, rng: &mut RngStream) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden)?;
        for layer in 0..net.num_layers() {
            let (n_in, n_out) = (net.dims[layer], net.dims[layer + 1]);
            let limit = match net.activations[layer] {
                Activation::Relu => (6.0 / n_in as f64).sqrt(),
                _ => (6.0 / (n_in + n_out) as f64).sqrt(),
            };
            let start = net.offsets[layer];
            for w in &mut net.params[start..start + n_in * n_out] {
                *w = rng.uniform(-limit, limit);
            }
        }
        Ok(net)
    }

    pub fn from_parts(dims: &[usize], activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims, Activation::Identity)?;
        check_len("activation count", dims.len() - 1, activations.len())?;
        check_len("parameter count", net.params.len(), params.len())?;
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            let layer = net.offsets.iter().rposition(|&o| o <= i).unwrap_or(0);
            return Err(Error::NonFinite {
                what: "checkpoint parameters",
                layer,
            });
        }
        net.activations = activations;
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
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

    /// `(weights, biases)` of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
        let start = self.offsets[layer];
        let (w, rest) = self.params[start..self.offsets[layer + 1]].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        Ok(self.forward_tape(input, &mut tape)?.to_vec())
    }

    /// Forward pass that records what [`Mlp::backward_tape`] needs.
    pub fn forward_tape<'t>(&self, input: &[f64], tape: &'t mut Tape) -> Result<&'t [f64]> {
        check_len("network input", self.input_dim(), input.len())?;
        tape.acts.resize_with(self.dims.len(), Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        for layer in 0..self.num_layers() {
            let (w, b) = self.layer(layer);
            let act = self.activations[layer];
            let n_in = self.dims[layer];
            let (prev, next) = tape.acts.split_at_mut(layer + 1);
            let x = &prev[layer];
            let y = &mut next[0];
            y.clear();
            for (row, &bias) in w.chunks_exact(n_in).zip(b) {
                let z = bias + dot(row, x);
                y.push(act.apply(z));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "forward activation",
                    layer,
                });
            }
        }
        Ok(&tape.acts[self.dims.len() - 1])
    }

    /// Accumulates into `grads` the parameter gradient of `dot(output, upstream)`
    /// for the sample last recorded in `tape`. Writes the input gradient into
    /// `input_grad` when given.
    pub fn backward_tape(
        &self,
        tape: &mut Tape,
        upstream: &[f64],
        grads: &mut [f64],
        input_grad: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        check_len("gradient buffer", self.params.len(), grads.len())?;
        let Tape {
            acts,
            delta,
            delta_prev,
        } = tape;
        delta.clear();
        delta.extend_from_slice(upstream);
        for layer in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
            let act = self.activations[layer];
            let y = &acts[layer + 1];
            let x = &acts[layer];
            for (d, &yo) in delta.iter_mut().zip(y) {
                *d *= act.derivative_from_output(yo);
            }
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "backward delta",
                    layer,
                });
            }
            let start = self.offsets[layer];
            let (gw, gb) = grads[start..self.offsets[layer + 1]].split_at_mut(n_in * n_out);
            for ((grow, gbias), &d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(delta.iter()) {
                if d != 0.0 {
                    for (g, &xi) in grow.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
                *gbias += d;
            }
            if layer > 0 || input_grad.is_some() {
                let (w, _) = self.layer(layer);
                delta_prev.clear();
                delta_prev.resize(n_in, 0.0);
                for (row, &d) in w.chunks_exact(n_in).zip(delta.iter()) {
                    if d != 0.0 {
                        for (p, &wi) in delta_prev.iter_mut().zip(row) {
                            *p += d * wi;
                        }
                    }
                }
                std::mem::swap(delta, delta_prev);
            }
        }
        if let Some(out) = input_grad {
            out.clear();
            out.extend_from_slice(delta);
        }
        Ok(())
    }

    /// Exact gradients of `dot(forward(input), upstream)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape)?;
        let mut params = vec![0.0; self.params.len()];
        let mut input_grad = Vec::new();
        self.backward_tape(&mut tape, upstream, &mut params, Some(&mut input_grad))?;
        Ok(Gradients {
            params,
            input: input_grad,
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
