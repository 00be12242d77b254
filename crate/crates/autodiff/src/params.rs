use std::collections::HashMap;

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zeros,
    Constant(f64),
}

impl Init {
    fn bound(&self) -> Option<f64> {
        match *self {
            Init::Uniform(b) => Some(b),
            Init::FanIn(f) => Some(1.0 / (f.max(1) as f64).sqrt()),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
}

/// Named trainable tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init.bound() {
            Some(b) => (0..n).map(|_| T::c(rng.random_range(-b..=b))).collect(),
            None => {
                let v = match init {
                    Init::Constant(c) => c,
                    _ => 0.0,
                };
                vec![T::c(v); n]
            }
        };
        self.insert(name, Tensor::new(shape, data)?, init)
    }

    /// Adds a tensor with explicit values.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, init });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Records parameters as leaves that never receive gradients.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    /// Concatenated little-endian bytes of every tensor, in insertion order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_elements() * T::BYTES);
        for p in &self.params {
            out.extend(p.value.to_le_bytes());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    init: p.init,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles of a bound [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after backward; parameters the loss did not reach get zeros.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> GradSet<T> {
        GradSet {
            grads: self.vars.iter().map(|&v| Some(tape.grad_or_zeros(v))).collect(),
        }
    }
}

/// One optional gradient per parameter, aligned with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradSet<T> {
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        Self {
            grads: params
                .iter()
                .map(|p| Some(Tensor::zeros(p.value.shape().to_vec())))
                .collect(),
        }
    }

    /// Element-wise sum, used to reduce per-chunk gradients.
    pub fn accumulate(&mut self, other: &GradSet<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::c(s);
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
