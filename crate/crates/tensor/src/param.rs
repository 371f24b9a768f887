use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter collection. Iteration order is lexicographic by name, so
/// every consumer (optimizer, checkpoint writer, gradient check) visits
/// parameters in the same deterministic order.
#[derive(Clone, Debug, Default)]
pub struct NamedParamSet<T: Scalar = f32> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> NamedParamSet<T> {
    pub fn new() -> Self {
        NamedParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if name.is_empty() {
            return Err(TensorError::InvalidArgument(
                "parameter name must be non-empty".into(),
            ));
        }
        if self.entries.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, TensorError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in self.entries.values_mut() {
            e.trainable = trainable;
        }
    }

    /// Flips trainability for every parameter whose name starts with
    /// `prefix`. Returns how many entries matched; zero usually means a
    /// misspelled prefix, so callers should check it.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut hit = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
                hit += 1;
            }
        }
        hit
    }

    /// Moves every entry of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: NamedParamSet<T>) -> Result<(), TensorError> {
        for (name, entry) in other.entries {
            self.insert(format!("{prefix}{name}"), entry.tensor, entry.trainable)?;
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).count()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NamedParamSet<U> {
        NamedParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast::<U>(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut p = NamedParamSet::<f32>::new();
        p.insert("zeta", Tensor::zeros(&[1]), true).unwrap();
        p.insert("alpha", Tensor::zeros(&[1]), true).unwrap();
        p.insert("mid.b", Tensor::zeros(&[1]), false).unwrap();
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, vec!["alpha", "mid.b", "zeta"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = NamedParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn absorb_prefixes_names() {
        let mut inner = NamedParamSet::<f32>::new();
        inner.insert("weight", Tensor::zeros(&[2]), true).unwrap();
        let mut outer = NamedParamSet::<f32>::new();
        outer.absorb("block0.", inner).unwrap();
        assert!(outer.contains("block0.weight"));
    }
}
