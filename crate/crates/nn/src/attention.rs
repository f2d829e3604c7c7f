//! Scaled dot-product attention, `softmax(QKᵀ/√d_k)V`, with learned projections.

use dsdf_tensor::{Tape, Var};
use rand::Rng;

use crate::error::{NnError, Result};
use crate::layers::Linear;
use crate::params::ParamStore;

/// Self- or cross-attention over token sequences shaped `[batch, tokens, dim]`.
///
/// Projections carry no bias, so an all-zero key/value input contributes
/// exactly zero to the output.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlock {
    /// `dim` is the model width for queries; keys and values are projected from `kv_dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::Config(format!(
                "{name}: width {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::without_bias(store, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::without_bias(store, &format!("{name}.k"), kv_dim, dim, rng)?,
            value: Linear::without_bias(store, &format!("{name}.v"), kv_dim, dim, rng)?,
            output: Linear::without_bias(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attends from `q_input: [B, Tq, dim]` over `kv_input: [B, Tk, kv_dim]`.
    /// Passing the same tensor twice gives self-attention. The residual
    /// connection is left to the caller.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, q_input: &Var, kv_input: &Var) -> Result<Var> {
        let (qs, ks) = (q_input.shape(), kv_input.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(NnError::Tensor(dsdf_tensor::TensorError::ShapeMismatch {
                op: "attention",
                lhs: qs.to_vec(),
                rhs: ks.to_vec(),
            }));
        }
        let q = self.query.forward(tape, store, q_input)?;
        let k = self.key.forward(tape, store, kv_input)?;
        let v = self.value.forward(tape, store, kv_input)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (
                    tape.slice(&q, 2, h * dk, dk)?,
                    tape.slice(&k, 2, h * dk, dk)?,
                    tape.slice(&v, 2, h * dk, dk)?,
                )
            };
            let scores = tape.matmul(&qh, &tape.transpose(&kh)?)?;
            let scores = tape.scale(&scores, scale)?;
            let weights = tape.softmax(&scores, 2)?;
            heads.push(tape.matmul(&weights, &vh)?);
        }
        let mixed = if heads.len() == 1 {
            heads.pop().expect("one head")
        } else {
            let refs: Vec<&Var> = heads.iter().collect();
            tape.concat(&refs, 2)?
        };
        self.output.forward(tape, store, &mixed)
    }
}
