use rand::Rng;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(NnError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), true))
                .collect(),
        }
    }

    /// Same as [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Replaces all values; shapes must match.
    pub fn assign(&mut self, values: &[Tensor<F>]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(NnError::InvalidArgument(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.tensors.len()
            )));
        }
        for (dst, src) in self.tensors.iter_mut().zip(values) {
            if dst.shape() != src.shape() {
                return Err(NnError::Shape {
                    op: "assign",
                    detail: format!("{:?} vs {:?}", dst.shape(), src.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients (zeros where nothing flowed).
    pub fn grads<F: Real>(&self, grads: &Grads<F>, store: &ParamStore<F>) -> Vec<Vec<F>> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect()
    }
}

/// Uniform initialisation in `[-sqrt(3 / fan_in), sqrt(3 / fan_in)]`.
pub fn fan_in_uniform<F: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("sized from shape")
}
