use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered `name → tensor` map holding every parameter and buffer of a model.
///
/// Names follow `<stage>.<block>.<layer>.<param>`. Batch-norm running
/// statistics live alongside the trainable parameters and are told apart by
/// their `running_mean` / `running_var` suffix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedWeights<T> {
    entries: IndexMap<String, Tensor<T>>,
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Scalar> NamedWeights<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Appends an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Number of running-statistic scalars.
    pub fn buffer_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| is_running_stat(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Same names, same order, same shapes; reports the first mismatch.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            let first = self
                .names()
                .zip(other.names())
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.to_string())
                .or_else(|| {
                    let longer = if self.len() > other.len() { self } else { other };
                    longer.names().nth(self.len().min(other.len())).map(str::to_string)
                })
                .unwrap_or_default();
            return Err(Error::Incompatible(format!(
                "{} vs {} entries; first mismatch at `{first}`",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::Incompatible(format!("`{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Incompatible(format!(
                    "`{na}` shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NamedWeights<U> {
        NamedWeights {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Zero-valued twin with identical names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for NamedWeights<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(names: &[(&str, &[usize])]) -> NamedWeights<f32> {
        names
            .iter()
            .map(|(n, s)| (n.to_string(), Tensor::zeros(s)))
            .collect()
    }

    #[test]
    fn compatibility_names_first_mismatch() {
        let a = set(&[("a.b.c.weight", &[2]), ("a.b.c.bias", &[1])]);
        let b = set(&[("a.b.c.weight", &[2]), ("a.b.c.bias", &[2])]);
        let err = a.check_compatible(&b).unwrap_err().to_string();
        assert!(err.contains("a.b.c.bias"), "{err}");
        let c = set(&[("a.b.c.weight", &[2])]);
        assert!(a.check_compatible(&c).is_err());
        assert!(a.check_compatible(&a.clone()).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut w = NamedWeights::<f32>::new();
        w.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(w.insert("x", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn running_stats_are_not_trainable() {
        let w = set(&[("s.b.bn1.gamma", &[4]), ("s.b.bn1.running_mean", &[4])]);
        assert_eq!(w.trainable_count(), 4);
        assert_eq!(w.buffer_count(), 4);
    }
}
