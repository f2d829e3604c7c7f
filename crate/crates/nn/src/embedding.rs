use dsdf_tensor::Tensor;

use crate::error::{NnError, Result};

/// Sinusoidal embedding of an integer timestep. Pair `i` holds
/// `sin(t·ω_i), cos(t·ω_i)` with `ω_i = 10000^(−2i/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Tensor> {
    timestep_embeddings(&[t], dim)?
        .reshape(vec![dim])
        .map_err(NnError::from)
}

/// Row-stacked embeddings, `[timesteps.len(), dim]`.
pub fn timestep_embeddings(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(NnError::OddDimension(dim));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64))
        .collect();
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for &w in &freqs {
            let angle = t as f64 * w;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::new(vec![timesteps.len(), dim], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timestep() {
        let e = timestep_embedding(0, 8).unwrap();
        for pair in e.data().chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(timestep_embedding(3, 7), Err(NnError::OddDimension(7))));
    }

    #[test]
    fn deterministic() {
        assert_eq!(timestep_embedding(123, 32).unwrap(), timestep_embedding(123, 32).unwrap());
    }
}
