//! Named parameter storage shared by every model component.
//!
//! Parameters live outside the tape as flat buffers; each forward pass binds
//! the trainable ones as tape leaves. Non-trainable entries (batch-norm
//! running statistics, feature standardization) are state carried alongside.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter {name} data does not match shape"
        );
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, shape, data, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].data
    }

    pub fn set_data(&mut self, id: ParamId, data: Vec<S>) {
        assert_eq!(data.len(), self.entries[id.0].data.len());
        self.entries[id.0].data = data;
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Count of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Bind every trainable parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Result<TapeBinding> {
        let mut nodes = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.trainable {
                let t = Tensor::new(e.data.clone(), e.shape.clone())?;
                nodes.push(Some(tape.param(t)));
            } else {
                nodes.push(None);
            }
        }
        Ok(TapeBinding { nodes })
    }
}

/// Per-forward map from parameters to tape leaves.
pub struct TapeBinding {
    nodes: Vec<Option<NodeId>>,
}

impl TapeBinding {
    pub fn node(&self, id: ParamId) -> Result<NodeId> {
        self.nodes[id.0].ok_or_else(|| Error::Contract("parameter is not bound to the tape".into()))
    }
}

// ── Initialization helpers ──────────────────────────────────────────

/// U(−1/√fan_in, 1/√fan_in), the default for linear & conv weights.
pub fn fan_in_uniform<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect()
}

pub fn zeros<S: Scalar>(len: usize) -> Vec<S> {
    vec![S::ZERO; len]
}

pub fn ones<S: Scalar>(len: usize) -> Vec<S> {
    vec![S::ONE; len]
}
