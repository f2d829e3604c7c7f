//! Finite-difference checks over every scalar in a [`ParamStore`].

use dsdf_tensor::{central_difference, max_relative_error, Tape, Tensor, Var};

use crate::error::Result;
use crate::params::ParamStore;

/// Maximum relative error between tape gradients and central differences,
/// taken over every unfrozen parameter of `store`.
///
/// `loss` must be deterministic in the store's values.
pub fn check_param_gradients<F>(store: &ParamStore, loss: F, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let l = loss(&tape, store)?;
    let grads = tape.backward(&l)?;
    let mut worst = 0.0f64;
    for id in store.ids() {
        if store.is_frozen(id) {
            continue;
        }
        let analytic = grads
            .param(store.tape_index(id))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(store.get(id)));
        let numeric = central_difference(
            |probe| {
                let mut perturbed = store.clone();
                perturbed.set(id, probe.clone()).expect("same shape");
                let tape = Tape::inference();
                loss(&tape, &perturbed)
                    .map_err(|e| match e {
                        crate::NnError::Tensor(t) => t,
                        other => dsdf_tensor::TensorError::Domain {
                            op: "check_param_gradients",
                            detail: other.to_string(),
                        },
                    })?
                    .item()
            },
            store.get(id),
            eps,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric)?);
    }
    Ok(worst)
}
