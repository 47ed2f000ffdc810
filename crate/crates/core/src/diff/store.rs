use std::collections::HashMap;

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with gradient accumulators of identical shape.
///
/// `touched` marks parameters that took part in the last backward pass, so the
/// optimizer leaves parameters of unrelated towers alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    touched: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.touched.push(false);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        self.touched[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        debug_assert_eq!(grad.shape(), self.grads[id.0].shape());
        for (g, d) in self.grads[id.0].data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        self.touched[id.0] = true;
    }

    pub(crate) fn accumulate_rows(&mut self, id: ParamId, row_width: usize, rows: &[(usize, &[f64])]) {
        let g = self.grads[id.0].data_mut();
        for (row, vals) in rows {
            let base = row * row_width;
            for (slot, v) in g[base..base + row_width].iter_mut().zip(vals.iter()) {
                *slot += v;
            }
        }
        self.touched[id.0] = true;
    }

    pub(crate) fn mark_touched(&mut self, id: ParamId) {
        self.touched[id.0] = true;
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.touched.iter_mut().for_each(|t| *t = false);
    }

    /// Parameter values in id order; used for equality checks and checkpoints.
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_mirror_parameter_shapes() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(s.grad(a).shape(), s.value(a).shape());
        assert!(s.add("a", Tensor::scalar(1.0)).is_err());
        assert_eq!(s.id("a"), Some(a));
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        s.accumulate(a, &Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        assert!(s.is_touched(a));
        s.zero_grad();
        assert_eq!(s.grad(a).data(), &[0.0, 0.0]);
        assert!(!s.is_touched(a));
    }
}
