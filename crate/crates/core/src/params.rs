//! Named parameter store. Paths are dotted and unique; shapes are fixed at
//! insertion. Frozen entries never receive gradient updates. Buffer entries
//! (batch-norm running statistics) are excluded from gradients and from
//! trainable-parameter counts but may be overwritten by the training loop.

use std::collections::BTreeMap;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::tensor::Arr;

#[derive(Debug, Clone)]
pub struct Entry {
    pub value: Arr,
    pub frozen: bool,
    pub buffer: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, value: Arr) -> Result<()> {
        self.insert_entry(path, value, false, false)
    }

    pub fn insert_buffer(&mut self, path: &str, value: Arr) -> Result<()> {
        self.insert_entry(path, value, false, true)
    }

    pub fn insert_kind(&mut self, path: &str, value: Arr, buffer: bool) -> Result<()> {
        self.insert_entry(path, value, false, buffer)
    }

    fn insert_entry(&mut self, path: &str, value: Arr, frozen: bool, buffer: bool) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(Error::config(format!("duplicate parameter path `{path}`")));
        }
        self.entries
            .insert(path.to_string(), Entry { value, frozen, buffer });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Entry> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::config(format!("unknown parameter path `{path}`")))
    }

    pub fn value(&self, path: &str) -> Result<&Arr> {
        Ok(&self.get(path)?.value)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Overwrite a value; the shape must match the stored one.
    pub fn set_value(&mut self, path: &str, value: Arr) -> Result<()> {
        let entry = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::config(format!("unknown parameter path `{path}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "shape change for `{path}`: {:?} -> {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, path: &str, frozen: bool) -> Result<()> {
        let entry = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::config(format!("unknown parameter path `{path}`")))?;
        entry.frozen = frozen;
        Ok(())
    }

    /// Freeze every entry whose path starts with `prefix`. Returns the count.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (path, entry) in self.entries.iter_mut() {
            if path.starts_with(prefix) {
                entry.frozen = true;
                n += 1;
            }
        }
        n
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Trainable scalar count: non-frozen, non-buffer entries.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen && !e.buffer)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.frozen && !e.buffer)
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Paths matching a glob pattern where `*` matches any run of characters.
    pub fn matching_paths(&self, pattern: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|p| glob_match(pattern, p))
            .cloned()
            .collect()
    }

    /// True when both stores hold exactly the same paths with equal shapes.
    pub fn same_structure(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(
                |((pa, ea), (pb, eb))| pa == pb && ea.value.shape() == eb.value.shape(),
            )
    }

    /// Convenience used by init code: insert a tensor of zeros.
    pub fn insert_zeros(&mut self, path: &str, shape: &[usize]) -> Result<()> {
        self.insert(path, Arr::zeros(IxDyn(shape)))
    }
}

/// Bit-stable FNV-1a hash over every entry whose path starts with `prefix`;
/// freeze contracts compare this before and after training.
pub fn param_hash(store: &ParameterStore, prefix: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (path, entry) in store.iter() {
        if !path.starts_with(prefix) {
            continue;
        }
        for b in path.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        for v in entry.value.iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

/// `*`-wildcard glob matching (no escapes, `*` spans any characters).
pub fn glob_match(pattern: &str, text: &str) -> bool {
    fn inner(p: &[u8], t: &[u8]) -> bool {
        match p.first() {
            None => t.is_empty(),
            Some(b'*') => {
                (0..=t.len()).any(|k| inner(&p[1..], &t[k..]))
            }
            Some(&c) => t.first() == Some(&c) && inner(&p[1..], &t[1..]),
        }
    }
    inner(pattern.as_bytes(), text.as_bytes())
}
