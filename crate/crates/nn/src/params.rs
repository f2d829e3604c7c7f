//! Named parameter storage and initialization.

use std::collections::BTreeMap;
use std::sync::Arc;

use dsdf_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{NnError, Result};

/// Handle to a parameter slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    frozen: bool,
}

/// Ordered collection of named trainable tensors.
///
/// Slots are bound onto a tape with [`ParamStore::bind`]; the tape reports
/// gradients by slot index, which is what [`crate::Adam`] consumes. Stores
/// that share a tape need disjoint index ranges; see [`ParamStore::set_tape_offset`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    tape_offset: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            frozen: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Shifts the index every slot is reported under on a tape.
    pub fn set_tape_offset(&mut self, offset: usize) {
        self.tape_offset = offset;
    }

    /// Index of a slot on the tape, as used by [`dsdf_tensor::Gradients::param`].
    pub fn tape_index(&self, id: ParamId) -> usize {
        self.tape_offset + id.0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// Places the parameter on the tape; frozen parameters enter as constants.
    pub fn bind(&self, tape: &Tape, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        if e.frozen {
            Var::constant((*e.value).clone())
        } else {
            tape.param(self.tape_offset + id.0, &e.value)
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes or thaws every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
            n += 1;
        }
        n
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(NnError::ParamShape {
                name: e.name.clone(),
                expected: e.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Snapshot of every parameter by name.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `named`; each must be present with a matching shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let value = named
                .get(&name)
                .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            self.set(id, value.clone())?;
        }
        Ok(())
    }
}

/// Glorot-uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn init_params<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform samples are finite")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
