use super::graph::{Gradients, Graph, Var};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of model weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`.
    pub fn add_linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) -> ParamId {
        let s = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.normal() * s).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("linear shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Registers every tensor as a constant leaf (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Binds only the tensors with indices in `range` as constants; every
    /// other id maps to a placeholder that must not be used.
    pub fn bind_frozen_range(&self, g: &mut Graph, range: std::ops::Range<usize>) -> Bound {
        let placeholder = g.constant(Tensor::scalar(f64::NAN));
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if range.contains(&i) {
                        g.constant(t.clone())
                    } else {
                        placeholder
                    }
                })
                .collect(),
        )
    }

    /// Copies tensors by name from `other`; names missing there are left
    /// untouched. Shapes must agree.
    pub fn copy_matching(&mut self, other: &ParamSet, prefix_from: &str, prefix_to: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some(rest) = name.strip_prefix(prefix_to) else {
                continue;
            };
            let src_name = format!("{prefix_from}{rest}");
            if let Some(id) = other.find(&src_name) {
                let src = other.get(id);
                if src.shape() != t.shape() {
                    return Err(Error::Incompatible(format!(
                        "{src_name}: {:?} vs {:?}",
                        src.shape(),
                        t.shape()
                    )));
                }
                *t = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Collects per-parameter gradients in `ParamSet` order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.0.iter().map(|&v| grads.get(v)).collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
