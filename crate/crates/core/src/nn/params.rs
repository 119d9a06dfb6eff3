//! Named parameter storage with deferred initialization.
//!
//! Layers register parameter shapes while the model is built; values are
//! only allocated by [`ParamStore::materialize`]. This lets shape and cost
//! reports run on the full-resolution model without touching memory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as running normalization statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
    value: Option<Tensor>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            init,
            kind,
            value: None,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Allocates and initializes every parameter. Each entry draws from its
    /// own ChaCha stream keyed by registration index, so values depend only
    /// on `(seed, index)`.
    pub fn materialize(&mut self, seed: u64) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            let t = match e.init {
                Init::Constant(c) => Tensor::full(&e.shape, c),
                Init::HeNormal { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_fn(&e.shape, |_| dist.sample(&mut rng))
                }
            };
            e.value = Some(t);
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_some())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        let e = &self.entries[id.0];
        e.value.as_ref().ok_or_else(|| Error::Unmaterialized(e.name.clone()))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        let e = &mut self.entries[id.0];
        e.value.as_mut().ok_or_else(|| Error::Unmaterialized(e.name.clone()))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.shape() != e.shape.as_slice() {
            return Err(Error::shape("ParamStore::set", &e.shape, value.shape()));
        }
        e.value = Some(value);
        Ok(())
    }

    /// Total element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(ParamEntry::numel)
            .sum()
    }

    /// Trainable element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(prefix))
            .map(ParamEntry::numel)
            .sum()
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore) -> Self {
        ParamBuilder {
            store,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn trainable(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n = self.full(name);
        self.store.register(n, shape, init, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n = self.full(name);
        self.store.register(n, shape, init, ParamKind::Buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn materialize_is_seeded_and_per_entry() {
        let mut a = ParamStore::new();
        let w = ParamBuilder::new(&mut a).sub("l").trainable("w", &[4, 3], Init::HeNormal { fan_in: 3 });
        let mut b = a.clone();
        a.materialize(7);
        b.materialize(7);
        assert!(a.get(w).unwrap().bit_eq(b.get(w).unwrap()));
        assert_eq!(a.entry(w).name, "l.w");

        // adding a later parameter does not perturb earlier draws
        let mut c = ParamStore::new();
        let w2 = ParamBuilder::new(&mut c).sub("l").trainable("w", &[4, 3], Init::HeNormal { fan_in: 3 });
        c.register("extra".into(), &[5], Init::HeNormal { fan_in: 1 }, ParamKind::Trainable);
        c.materialize(7);
        assert!(c.get(w2).unwrap().bit_eq(a.get(w).unwrap()));
    }

    #[test]
    fn unmaterialized_access_errors() {
        let mut s = ParamStore::new();
        let id = s.register("x".into(), &[2], Init::Constant(1.0), ParamKind::Buffer);
        assert!(matches!(s.get(id), Err(Error::Unmaterialized(_))));
        assert_eq!(s.trainable_count(), 0);
    }
}
