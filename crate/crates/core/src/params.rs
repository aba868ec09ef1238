//! Named parameter storage shared by the encoder, the adapters and the
//! optimizer. Parameters are addressed by dotted paths such as
//! `blocks.2.temporal.wq` so freeze masks and checkpoints can name them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub gradient: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter {
            value,
            gradient,
            trainable: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> ParamId {
        let path = path.into();
        assert!(
            !self.index.contains_key(&path),
            "duplicate parameter path {path}"
        );
        let id = self.params.len();
        self.index.insert(path.clone(), id);
        self.names.push(path);
        self.params.push(Parameter::new(value));
        ParamId(id)
    }

    pub fn id(&self, path: &str) -> Result<ParamId> {
        self.index
            .get(path)
            .map(|i| ParamId(*i))
            .ok_or_else(|| Error::Config(format!("unknown parameter path {path:?}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.index.contains_key(path)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_path(&self, path: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(path)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Paths in insertion order; insertion order is fixed by model
    /// construction, which keeps everything downstream deterministic.
    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(|s| s.as_str()).zip(self.params.iter())
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// Marks exactly the given paths trainable and freezes the rest.
    pub fn set_trainable_paths(&mut self, trainable: &[String]) -> Result<()> {
        for p in &mut self.params {
            p.trainable = false;
        }
        for path in trainable {
            let id = self.id(path)?;
            self.params[id.0].trainable = true;
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).count()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_resolve_and_order_is_stable() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::zeros(&[2, 2]));
        store.insert("b.w", Tensor::zeros(&[3]));
        assert_eq!(store.id("a.w").unwrap(), ParamId(0));
        assert_eq!(store.id("b.w").unwrap(), ParamId(1));
        assert!(store.id("c.w").is_err());
        let names: Vec<_> = store.paths().collect();
        assert_eq!(names, vec!["a.w", "b.w"]);
    }

    #[test]
    fn freeze_mask_partitions_parameters() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[1]));
        store.insert("y", Tensor::zeros(&[1]));
        store.set_trainable_paths(&["y".to_string()]).unwrap();
        assert!(!store.by_path("x").unwrap().trainable);
        assert!(store.by_path("y").unwrap().trainable);
        assert_eq!(store.trainable_count(), 1);
    }
}
