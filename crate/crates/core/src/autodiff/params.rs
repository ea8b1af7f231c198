use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradStore<S> = BTreeMap<String, Tensor<S>>;

/// A parameter together with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub m1: Tensor<S>,
    pub m2: Tensor<S>,
}

/// Named parameters plus optimizer state. Iteration is in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
    step: u64,
}

/// Graph handles for every parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Extracts per-parameter gradients; parameters the loss does not reach
    /// get zeros.
    pub fn collect<S: Scalar>(&self, graph: &Graph<S>, grads: &Gradients<S>) -> GradStore<S> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Uniform fan-based initialization, `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<S: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.random_range(-limit..=limit)))
}

/// Glorot init for a conv kernel `[O, C, KH, KW]`.
pub fn conv_kernel<S: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<S> {
    let [o, c, kh, kw] = shape;
    glorot_uniform(&shape, c * kh * kw, o * kh * kw, rng)
}

/// Glorot init for a dense matrix `[in, out]`.
pub fn dense<S: Scalar, R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Tensor<S> {
    glorot_uniform(&[inputs, outputs], inputs, outputs, rng)
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    /// Adds or replaces a parameter and resets its moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let zeros = Tensor::zeros(value.shape().to_vec());
        self.params.insert(
            name.into(),
            Param {
                m1: zeros.clone(),
                m2: zeros,
                value,
            },
        );
    }

    pub fn insert_with_moments(&mut self, name: impl Into<String>, param: Param<S>) -> Result<()> {
        let name = name.into();
        if param.m1.shape() != param.value.shape() || param.m2.shape() != param.value.shape() {
            return Err(Error::shape(
                "param",
                format!("moments of {name:?} do not match {:?}", param.value.shape()),
            ));
        }
        self.params.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bindings {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), graph.param(p.value.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference without gradients
    /// into the weights).
    pub fn bind_frozen(&self, graph: &mut Graph<S>) -> Bindings {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), graph.constant(p.value.clone())))
                .collect(),
        }
    }

    /// Converts values and moments to another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            m1: p.m1.cast(),
                            m2: p.m2.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}
