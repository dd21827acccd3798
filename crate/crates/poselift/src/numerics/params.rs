use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Stable handle to a named parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors with per-parameter gradient accumulators.
/// Names are unique; a gradient always has the shape of its parameter.
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), grads: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{}'", name)));
        }
        if !tensor.all_finite() {
            return Err(Error::Numeric(format!("parameter '{}' contains non-finite values", name)));
        }
        let id = self.tensors.len();
        self.grads.push(Tensor::zeros(tensor.shape().to_vec()));
        self.tensors.push(tensor);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Sum of element counts over parameters whose name starts with `prefix`.
    pub fn elements_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = T::ZERO;
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let g = &mut self.grads[id.0];
        if g.numel() != grad.len() {
            return Err(Error::Dimension(format!(
                "gradient for '{}' has {} elements, parameter has {}",
                self.names[id.0],
                grad.len(),
                g.numel()
            )));
        }
        for (a, &b) in g.data_mut().iter_mut().zip(grad) {
            *a += b;
        }
        Ok(())
    }

    /// Scales every accumulated gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, c: T) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Deep conversion to another precision (used when loading f64
    /// checkpoints into an f32 speed-mode run and vice versa).
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for id in self.ids() {
            let t = self.tensor(id);
            let conv = Tensor::<U>::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| U::from_f64(v.to_f64())).collect(),
            )
            .expect("shape preserved");
            out.register(self.name(id).to_string(), conv).expect("names stay unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(store.register("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn grads_match_param_shapes() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::zeros(vec![3, 4])).unwrap();
        assert_eq!(store.grad(id).shape(), &[3, 4]);
        store.accumulate_grad(id, &vec![1.0; 12]).unwrap();
        assert!(store.accumulate_grad(id, &vec![1.0; 5]).is_err());
        assert_eq!(store.grad(id).data()[0], 1.0);
        store.zero_grads();
        assert_eq!(store.grad(id).data()[0], 0.0);
    }

    #[test]
    fn non_finite_params_rejected() {
        let mut store = ParamStore::<f64>::new();
        let bad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(store.register("w", bad).is_err());
    }
}
