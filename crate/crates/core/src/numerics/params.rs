use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Real, Tensor};
use crate::{Error, Result};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<R> {
    pub name: String,
    pub value: Arc<Tensor<R>>,
}

/// Named trainable tensors of one network.
///
/// Values sit behind `Arc` so a tape can bind them without copying; an
/// optimizer step clones-on-write only if a tape still holds a reference.
#[derive(Debug)]
pub struct ParamStore<R> {
    uid: u64,
    params: Vec<Parameter<R>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<R> Default for ParamStore<R> {
    fn default() -> Self {
        ParamStore {
            uid: next_uid(),
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }
}

impl<R: Clone> Clone for ParamStore<R> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: next_uid(),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<R>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Parameters in name order, which is also the serialization order.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.by_name
            .iter()
            .map(|(name, id)| (name.as_str(), &*self.params[id.0].value))
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replace a value by name, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))?;
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", cur.shape(), value.shape()));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Hash of every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.sorted() {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write_usize(d);
            }
            // multiply-rotate fold; SipHash per element is too slow for
            // tens of millions of values
            let folded = t.data().iter().fold(0u64, |acc, &v| {
                (acc ^ v.as_f64().to_bits()).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29)
            });
            h.write_u64(folded);
        }
        h.finish()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            uid: next_uid(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradients for the parameters of one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct GradBuffer<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> GradBuffer<R> {
    pub fn new(len: usize) -> Self {
        GradBuffer {
            grads: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<R>) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer<R>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: R) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm does not exceed `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(R::of_f64(max_norm / norm));
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<R>>)> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a.w", Tensor::zeros([2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn sorted_is_name_order() {
        let mut s = ParamStore::<f64>::new();
        s.add("b", Tensor::zeros([1])).unwrap();
        s.add("a", Tensor::zeros([1])).unwrap();
        let names: Vec<_> = s.sorted().map(|(n, _)| n).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros([3])).unwrap();
        let before = s.fingerprint();
        assert_eq!(before, s.clone().fingerprint());
        s.get_mut(id).data_mut()[1] = 1.0;
        assert_ne!(before, s.fingerprint());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = GradBuffer::<f64>::new(1);
        g.accumulate(ParamId(0), &Tensor::new([2], vec![3.0, 4.0]).unwrap());
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
