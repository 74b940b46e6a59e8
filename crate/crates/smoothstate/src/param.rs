//! Named trainable parameters with accumulated gradients.

use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable value plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat registry of all parameters of a model, in creation order.
///
/// Creation order is the serialization order for checkpoints, so modules
/// must register their parameters deterministically.
#[derive(Default, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape.clone());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) {
        let p = &mut self.params[id.0];
        assert_eq!(
            p.grad.shape, delta.shape,
            "grad accumulate: shape {:?} vs {:?} for '{}'",
            p.grad.shape, delta.shape, p.name
        );
        for (a, b) in p.grad.data.iter_mut().zip(delta.data.iter()) {
            *a += b;
        }
    }

    /// Resets gradients of the listed parameters to exactly 0.0.
    pub fn zero_grad(&mut self, ids: &[ParamId]) {
        for &id in ids {
            for g in self.params[id.0].grad.data.iter_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    /// Ids of parameters whose name starts with `prefix`, in creation order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].name.starts_with(prefix))
            .map(ParamId)
            .collect()
    }

    /// Global L2 norm over the gradients of the listed parameters.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        let mut sq = 0.0;
        for &id in ids {
            for g in &self.params[id.0].grad.data {
                sq += g * g;
            }
        }
        sq.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_resets_exactly() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::zeros(vec![3]));
        store.accumulate_grad(p, &Tensor::new(vec![3], vec![1.0, -2.0, 3.0]));
        store.zero_grad(&[p]);
        assert!(store.grad(p).data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn prefix_lookup_preserves_order() {
        let mut store = ParamStore::new();
        store.add("enc.a", Tensor::zeros(vec![1]));
        store.add("dec.a", Tensor::zeros(vec![1]));
        store.add("enc.b", Tensor::zeros(vec![1]));
        let ids = store.ids_with_prefix("enc.");
        assert_eq!(ids, vec![ParamId(0), ParamId(2)]);
    }
}
