use std::collections::BTreeMap;

use rand::Rng;

use super::Array;
use crate::error::{LadError, Result};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub gradient: Array,
}

/// Named parameters in insertion order. Names are unique dotted paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

pub(crate) static EMPTY_STORE: ParamStore = ParamStore {
    params: Vec::new(),
    index: BTreeMap::new(),
};

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(LadError::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        let gradient = Array::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            gradient,
        });
        Ok(ParamId(id))
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Array::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// Copies a gradient set into the per-parameter gradient slots;
    /// parameters absent from `grads` end with zero gradient.
    pub fn set_grads(&mut self, grads: &Gradients) {
        for (i, p) in self.params.iter_mut().enumerate() {
            match grads.get(ParamId(i)) {
                Some(g) => p.gradient.data_mut().copy_from_slice(g.data()),
                None => p.gradient.data_mut().fill(0.0),
            }
        }
    }

    /// Order-sensitive FNV-1a digest over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for v in p.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Array) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// `None` means the parameter was not reachable from the loss.
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn max_abs(&self, id: ParamId) -> f64 {
        self.get(id)
            .map(|g| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Array::is_finite)
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a.w", Array::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Array::zeros(&[2])).is_err());
        assert_eq!(s.id("a.w"), Some(ParamId(0)));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("x", Array::zeros(&[3])).unwrap();
        let before = s.checksum();
        s.value_mut(id).data_mut()[1] = 1.0;
        assert_ne!(before, s.checksum());
    }
}
