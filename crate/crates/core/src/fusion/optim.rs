use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{is_running_stat, NamedWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> OptimState<T> {
    /// Zeroed moments for every trainable entry of `weights`.
    pub fn new(weights: &NamedWeights<T>, lr: f64) -> Self {
        let moments = weights
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(n, t)| (n.to_string(), (vec![T::zero(); t.len()], vec![T::zero(); t.len()])))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn moment_shapes_match(&self, weights: &NamedWeights<T>) -> bool {
        self.moments
            .iter()
            .all(|(n, (m, _))| weights.get(n).map(|t| t.len() == m.len()).unwrap_or(false))
    }

    /// One update. Entries without a gradient keep their moments and values.
    pub fn apply(&mut self, weights: &mut NamedWeights<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let (c1, c2) = (T::lit(c1), T::lit(c2));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (name, g) in grads {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            let w = weights.get_mut(name)?;
            if g.shape() != w.shape() {
                return Err(Error::shape("optimizer", g.shape(), w.shape()));
            }
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
