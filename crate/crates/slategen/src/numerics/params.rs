//! Named parameter storage with per-parameter gradient slots.

use indexmap::IndexMap;
use thiserror::Error;

use super::matrix::Matrix;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParamError {
    #[error("parameter {0} already exists")]
    Duplicate(String),
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("update rejected: parameter {0} is frozen in the current phase")]
    Frozen(String),
}

/// Insertion-ordered map of named matrices plus same-shaped gradient slots.
/// Insertion order is the iteration order everywhere, which keeps optimizer
/// sweeps and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Matrix>,
    grads: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<(), ParamError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.grads.insert(name.clone(), Matrix::zeros(value.rows(), value.cols()));
        self.params.insert(name, value);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Result<&Matrix, ParamError> {
        self.params.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    /// Direct mutation, for loading checkpoints and running-statistic
    /// updates; optimizer steps go through [`ParamStore::apply_update`].
    pub fn set(&mut self, name: &str, value: Matrix) {
        match self.params.get_mut(name) {
            Some(slot) => {
                assert_eq!(
                    (slot.rows(), slot.cols()),
                    (value.rows(), value.cols()),
                    "shape change on parameter {name}"
                );
                *slot = value;
            }
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn grad(&self, name: &str) -> &Matrix {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Matrix) {
        let slot = self
            .grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        *slot = slot.add(delta).expect("gradient shape mismatch");
    }

    pub fn zero_grads(&mut self) {
        for (_, g) in self.grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` to the parameter, refusing names outside `trainable`.
    pub fn apply_update(
        &mut self,
        name: &str,
        delta: &Matrix,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(), ParamError> {
        if !trainable(name) {
            return Err(ParamError::Frozen(name.to_string()));
        }
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        *slot = slot.add(delta).expect("update shape mismatch");
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Largest absolute gradient entry among parameters matching `pred`,
    /// used by freeze-contract assertions.
    pub fn max_abs_grad(&self, pred: &dyn Fn(&str) -> bool) -> f64 {
        self.grads
            .iter()
            .filter(|(k, _)| pred(k))
            .flat_map(|(_, g)| g.data().iter().copied())
            .map(f64::abs)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::zeros(2, 2)).unwrap();
        assert_eq!(s.insert("w", Matrix::zeros(2, 2)), Err(ParamError::Duplicate("w".into())));
    }

    #[test]
    fn grad_slot_matches_param_shape() {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::zeros(3, 5)).unwrap();
        assert_eq!((s.grad("w").rows(), s.grad("w").cols()), (3, 5));
    }

    #[test]
    fn frozen_update_rejected() {
        let mut s = ParamStore::new();
        s.insert("emb/table", Matrix::zeros(2, 2)).unwrap();
        let trainable = |name: &str| !name.starts_with("emb/");
        let err = s.apply_update("emb/table", &Matrix::zeros(2, 2), &trainable);
        assert_eq!(err, Err(ParamError::Frozen("emb/table".into())));
    }

    #[test]
    fn accumulate_and_zero() {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::zeros(1, 2)).unwrap();
        s.accumulate_grad("w", &Matrix::from_rows(&[&[1.0, 2.0]]));
        s.accumulate_grad("w", &Matrix::from_rows(&[&[0.5, 0.5]]));
        assert_eq!(s.grad("w"), &Matrix::from_rows(&[&[1.5, 2.5]]));
        s.zero_grads();
        assert_eq!(s.grad("w"), &Matrix::zeros(1, 2));
    }
}
