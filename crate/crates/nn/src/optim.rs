//! Adaptive-moment optimizer with bias correction.

use std::collections::BTreeMap;

use dsdf_tensor::{Gradients, Tensor};

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Optimizer state: per-parameter moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<usize, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every unfrozen parameter that received a gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let mut updates: Vec<(ParamId, &Tensor)> = Vec::new();
        for id in store.ids() {
            if store.is_frozen(id) {
                continue;
            }
            if let Some(g) = grads.param(store.tape_index(id)) {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGradient {
                        name: store.name(id).to_string(),
                    });
                }
                updates.push((id, g));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in updates {
            let m = self.moments.entry(id.index()).or_insert_with(|| Moments {
                first: Tensor::zeros_like(g),
                second: Tensor::zeros_like(g),
            });
            let param = store.value_mut(id);
            let (p, gd) = (param.data_mut(), g.data());
            let (m1, m2) = (m.first.data_mut(), m.second.data_mut());
            for i in 0..p.len() {
                m1[i] = beta1 * m1[i] + (1.0 - beta1) * gd[i];
                m2[i] = beta2 * m2[i] + (1.0 - beta2) * gd[i] * gd[i];
                let m_hat = m1[i] / c1;
                let v_hat = m2[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors keyed `<prefix>m.<param>` / `<prefix>v.<param>`, for checkpoints.
    pub fn export(&self, store: &ParamStore, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (&idx, m) in &self.moments {
            let name = store.name(ParamId(idx));
            out.insert(format!("{prefix}m.{name}"), m.first.clone());
            out.insert(format!("{prefix}v.{name}"), m.second.clone());
        }
        out
    }

    /// Restores state written by [`Adam::export`].
    pub fn import(
        config: AdamConfig,
        step: u64,
        store: &ParamStore,
        prefix: &str,
        named: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for id in store.ids() {
            let name = store.name(id);
            let first = named.get(&format!("{prefix}m.{name}"));
            let second = named.get(&format!("{prefix}v.{name}"));
            if let (Some(first), Some(second)) = (first, second) {
                moments.insert(
                    id.index(),
                    Moments {
                        first: first.clone(),
                        second: second.clone(),
                    },
                );
            }
        }
        Ok(Self {
            config,
            step,
            moments,
        })
    }
}
