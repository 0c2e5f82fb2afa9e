use std::collections::HashMap;

use super::{numel, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named tensor owned by a model.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<Real>,
    pub grad: Vec<Real>,
    /// Buffers (e.g. running norm statistics) are checkpointed but never
    /// touched by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, shape: &[usize], value: Vec<Real>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        if numel(shape) != value.len() {
            return Err(crate::error::shape_err("param", shape, &[value.len()]));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; value.len()],
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<Real>) -> Result<ParamId> {
        self.insert(name, shape, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], value: Vec<Real>) -> Result<ParamId> {
        self.insert(name, shape, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * g` into the stored gradients.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<Real>)], scale: Real) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn grad_norm(&self) -> Real {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<Real>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: Real) -> Real {
        let n = self.grad_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a.weight", &[2], vec![1.0, 2.0]).unwrap();
        assert!(s.add("a.weight", &[1], vec![0.0]).is_err());
        assert!(s.add("b", &[3], vec![0.0]).is_err());
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut s = ParamStore::new();
        let id = s.add("w", &[2], vec![0.0, 0.0]).unwrap();
        s.accumulate(&[(id, vec![30.0, 40.0])], 1.0);
        assert_eq!(s.clip_grad_norm(10.0), 50.0);
        let g = &s.get(id).grad;
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
    }
}
