use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{ParamId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected network. Hidden layers apply the activation; the output
/// layer is linear.
///
/// Parameters are stored as `[W0, b0, W1, b1, ...]` with `Wl` of shape
/// `[fan_in, fan_out]` and `bl` of shape `[1, fan_out]`; `ParamId(offset + i)`
/// names tensor `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    sizes: Vec<usize>,
    activation: Activation,
    tensors: Vec<Tensor>,
}

/// Glorot-uniform weights from a ChaCha8 stream seeded with `seed`, zero
/// biases. Weights are drawn layer by layer in row-major order.
pub fn build_mlp(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<MlpParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArgument("an MLP needs at least two layer sizes".into()));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidArgument("layer sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(2 * (layer_sizes.len() - 1));
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        tensors.push(Tensor::from_raw(fan_in, fan_out, values));
        tensors.push(Tensor::from_raw(1, fan_out, vec![0.0; fan_out]));
    }
    Ok(MlpParams {
        sizes: layer_sizes.to_vec(),
        activation,
        tensors,
    })
}

impl MlpParams {
    /// Assembles a network from explicit tensors, checking shapes.
    pub fn from_tensors(sizes: Vec<usize>, activation: Activation, tensors: Vec<Tensor>) -> Result<Self> {
        if sizes.len() < 2 || tensors.len() != 2 * (sizes.len() - 1) {
            return Err(Error::Shape("tensor count does not match layer sizes".into()));
        }
        for (l, w) in sizes.windows(2).enumerate() {
            if tensors[2 * l].dims2()? != (w[0], w[1]) || tensors[2 * l + 1].dims2()? != (1, w[1]) {
                return Err(Error::Shape(format!("layer {l} tensors have wrong shape")));
            }
        }
        Ok(MlpParams {
            sizes,
            activation,
            tensors,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zeroes the output layer so every input maps to zero logits.
    pub fn zero_output_layer(&mut self) {
        let n = self.tensors.len();
        for t in &mut self.tensors[n - 2..] {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records the forward pass on `tape`. When `trainable` is false the
    /// weights enter as constants and receive no gradient.
    pub fn forward_on(&self, tape: &mut Tape, input: Var, id_offset: usize, trainable: bool) -> Result<Var> {
        let (_, d) = tape.value(input).dims2()?;
        if d != self.input_dim() {
            return Err(Error::Shape(format!("input width {d}, network expects {}", self.input_dim())));
        }
        let n_layers = self.sizes.len() - 1;
        let mut h = input;
        for l in 0..n_layers {
            let (w, b) = if trainable {
                (
                    tape.param(ParamId(id_offset + 2 * l), &self.tensors[2 * l])?,
                    tape.param(ParamId(id_offset + 2 * l + 1), &self.tensors[2 * l + 1])?,
                )
            } else {
                (
                    tape.constant(self.tensors[2 * l].clone())?,
                    tape.constant(self.tensors[2 * l + 1].clone())?,
                )
            };
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if l + 1 < n_layers {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Plain forward evaluation without recording gradients.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let (rows, d) = input.dims2()?;
        if d != self.input_dim() {
            return Err(Error::Shape(format!("input width {d}, network expects {}", self.input_dim())));
        }
        let n_layers = self.sizes.len() - 1;
        let mut h = input.values().to_vec();
        for l in 0..n_layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let bias = self.tensors[2 * l + 1].values();
            let mut out = vec![0.0; rows * fo];
            super::tensor::gemm(
                &h,
                (rows, fi),
                false,
                self.tensors[2 * l].values(),
                (fi, fo),
                false,
                &mut out,
                false,
            );
            for row in out.chunks_mut(fo) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            if l + 1 < n_layers {
                match self.activation {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            h = out;
        }
        Ok(Tensor::from_raw(rows, self.output_dim(), h))
    }
}

/// Forward pass on a fresh tape; returns the output value, the tape and the
/// output handle for a later [`Tape::backprop`].
pub fn mlp_forward(params: &MlpParams, input: &Tensor) -> Result<(Tensor, Tape, Var)> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone())?;
    let out = params.forward_on(&mut tape, x, 0, true)?;
    Ok((tape.value(out).clone(), tape, out))
}
