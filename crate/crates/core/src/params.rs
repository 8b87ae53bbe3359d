//! Named parameter storage shared by the model and the training harness.
//!
//! Parameters live outside any tape. Each forward pass binds the whole store
//! onto a fresh [`Tape`] as leaf nodes ([`ParamStore::bind`]); after
//! `backward`, gradients are read back through the same [`Binding`].
//! Freezing a parameter (`trainable = false`) both hides it from the
//! optimizer and lets the tape skip its gradient entirely.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Index of a parameter within a [`ParamStore`] (stable for the lifetime of
/// the store).
pub type ParamId = usize;

/// A named, optionally trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of parameters with unique hierarchical names
/// (e.g. `image.block2.moa.expert3.w_down`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

/// Tape leaf ids for every parameter of a store, aligned by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p]
    }

    /// Build a binding from an explicit id list (gradient checks bind some
    /// parameters as externally supplied leaves).
    pub fn from_raw(ids: Vec<TensorId>) -> Self {
        Binding { ids }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: &[usize],
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidArgument {
                op: "param_store.add",
                msg: format!(
                    "parameter `{name}`: data length {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            });
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument {
                op: "param_store.add",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            data,
            shape: shape.to_vec(),
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate()
    }

    /// Ids of trainable parameters in creation order (the optimizer's
    /// deterministic update order).
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total scalar count over trainable parameters.
    pub fn count_trainable(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.numel() as u64)
            .sum()
    }

    /// Put every parameter on `tape` as a leaf. `with_grad = false` binds
    /// everything frozen (cheap inference passes).
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(tape.leaf(p.data.clone(), &p.shape, with_grad && p.trainable)?);
        }
        Ok(Binding { ids })
    }
}

// ------------------------------------------------------------ seeded init

/// Stable 64-bit FNV-1a hash of a label, mixed with a base seed. Every
/// random stream in the crate is derived this way, so runs are reproducible
/// and independent of call order. The top bit is cleared so derived seeds
/// stay representable as signed 64-bit integers, which config files
/// (TOML) require of integer values.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h & (i64::MAX as u64)
}

/// Seeded generator for the stream named by `label`.
pub fn stream_rng(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

/// `n` draws from N(0, std²) via Box–Muller.
pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect()
}
