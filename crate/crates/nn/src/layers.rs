use dsdf_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::{init_params, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fully connected layer: `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::without_bias(store, name, in_dim, out_dim, rng)?;
        layer.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?);
        Ok(layer)
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init_params(&[out_dim, in_dim], in_dim, out_dim, rng);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    /// Maps `[.., in]` to `[.., out]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let shape = x.shape();
        let last = shape.last().copied().unwrap_or(0);
        if last != self.in_dim {
            return Err(NnError::Dimension {
                what: "linear input",
                expected: self.in_dim,
                got: last,
            });
        }
        let w = store.bind(tape, self.weight);
        let wt = tape.transpose(&w)?;
        let y = if shape.len() == 1 {
            let row = tape.reshape(x, vec![1, self.in_dim])?;
            let y = tape.matmul(&row, &wt)?;
            tape.reshape(&y, vec![self.out_dim])?
        } else {
            tape.matmul(x, &wt)?
        };
        match self.bias {
            Some(b) => Ok(tape.add(&y, &store.bind(tape, b))?),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim]))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![dim]))?,
            dim,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let normalized = layer_norm(tape, x, &store.bind(tape, self.gain), &store.bind(tape, self.shift))?;
        Ok(normalized)
    }
}

/// `gain ⊙ normalize(x) + shift`, normalizing over the last axis with ε = 1e-5.
pub fn layer_norm(tape: &Tape, x: &Var, gain: &Var, shift: &Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let scaled = tape.mul(&n, gain)?;
    Ok(tape.add(&scaled, shift)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: &Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => tape.relu(x)?,
            Activation::Gelu => tape.gelu(x)?,
            Activation::Tanh => tape.tanh(x)?,
        })
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[3, 64, 64, 1]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(NnError::Config(format!("{name}: an MLP needs at least two widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, &h)?;
            if i < last {
                h = self.activation.apply(tape, &h)?;
            }
        }
        Ok(h)
    }
}
