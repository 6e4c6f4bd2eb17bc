use indexmap::IndexMap;

use super::{DenseArray, DiffError};

/// Index of an entry inside a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable array with its gradient slot and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: DenseArray,
    pub grad: DenseArray,
    pub adam_m: DenseArray,
    pub adam_v: DenseArray,
}

impl ParamEntry {
    fn new(value: DenseArray) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: DenseArray::zeros(&shape),
            adam_m: DenseArray::zeros(&shape),
            adam_v: DenseArray::zeros(&shape),
        }
    }
}

/// Named learnable arrays in insertion order, plus the optimizer step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
    step: u64,
}

/// Per-parameter gradients produced by a reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&DenseArray> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: DenseArray) -> Result<ParamId, DiffError> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let (idx, _) = self.entries.insert_full(name.to_string(), ParamEntry::new(value));
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("param id out of range")
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseArray {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &DenseArray {
        &self.entries[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Scalars held by entries whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a reverse sweep's gradients into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), DiffError> {
        if grads.slots.len() != self.entries.len() {
            return Err(DiffError::StoreMismatch(format!(
                "gradients cover {} entries, store has {}",
                grads.slots.len(),
                self.entries.len()
            )));
        }
        for ((name, e), g) in self.entries.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                if g.shape() != e.grad.shape() {
                    return Err(DiffError::StoreMismatch(format!(
                        "entry {name}: gradient shape {:?} vs value shape {:?}",
                        g.shape(),
                        e.grad.shape()
                    )));
                }
                e.grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries.values().map(|e| e.grad.sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for e in self.entries.values_mut() {
                e.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Copies values only (not moments) from `other`, which must have the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        if let Some(name) = self.first_layout_mismatch(other) {
            return Err(DiffError::StoreMismatch(format!("layout differs at entry {name}")));
        }
        for (dst, src) in self.entries.values_mut().zip(other.entries.values()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Name of the first entry whose name or shape differs, if any.
    pub fn first_layout_mismatch(&self, other: &ParamStore) -> Option<String> {
        for (i, (name, e)) in self.entries.iter().enumerate() {
            match other.entries.get_index(i) {
                Some((n2, e2)) if n2 == name && e2.value.shape() == e.value.shape() => {}
                _ => return Some(name.clone()),
            }
        }
        if other.entries.len() > self.entries.len() {
            return other.entries.get_index(self.entries.len()).map(|(k, _)| k.clone());
        }
        None
    }
}
