//! Named parameters and the per-forward binding of parameters to a tape.
//!
//! Architectures register their parameters in a [`ParamRegistry`], which is
//! dtype-free. A [`ParamStore`] holds the actual values, accumulated
//! gradients and batch-norm running statistics for one dtype. A [`Session`]
//! binds each parameter to a tape leaf at most once, so a parameter used by
//! both Siamese branches is a single leaf and its gradient is the sum over
//! both uses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::BatchNormState;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncatedNormal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormSpec {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    params: Vec<ParamSpec>,
    norms: Vec<NormSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter name {name}");
        self.params.push(ParamSpec { name, shape: Shape::new(shape), init });
        ParamId(self.params.len() - 1)
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, channels: usize) -> NormId {
        let name = name.into();
        assert!(self.norms.iter().all(|n| n.name != name), "duplicate norm name {name}");
        self.norms.push(NormSpec { name, channels });
        NormId(self.norms.len() - 1)
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn norms(&self) -> &[NormSpec] {
        &self.norms
    }

    /// Total scalar parameter count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.shape.numel()).sum()
    }
}

pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    norm_names: Vec<String>,
    norms: Vec<BatchNormState<T>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Initializes every parameter deterministically from `seed`: truncated
    /// normal draws in registration order from one stream, then cast to `T`.
    pub fn initialize(registry: &ParamRegistry, seed: u64, bn_momentum: f64, bn_eps: f64) -> Self {
        let mut stream = rng::rng_for(seed, &[0x1417]);
        let values = registry
            .params
            .iter()
            .map(|spec| {
                let n = spec.shape.numel();
                let data = match spec.init {
                    Init::Zeros => alloc::vec![T::zero(); n],
                    Init::Ones => alloc::vec![T::one(); n],
                    Init::TruncatedNormal { std } => {
                        (0..n).map(|_| T::from_f64(rng::truncated_normal(&mut stream, std))).collect()
                    }
                };
                Tensor::from_parts(spec.shape.clone(), data)
            })
            .collect();
        let norms = registry
            .norms
            .iter()
            .map(|n| {
                let mut s = BatchNormState::new(n.channels);
                s.momentum = T::from_f64(bn_momentum);
                s.eps = T::from_f64(bn_eps);
                s
            })
            .collect();
        Self::assemble(registry, values, norms)
    }

    fn assemble(registry: &ParamRegistry, values: Vec<Tensor<T>>, norms: Vec<BatchNormState<T>>) -> Self {
        let grads = registry.params.iter().map(|s| Tensor::zeros(s.shape.clone())).collect();
        ParamStore {
            specs: registry.params.clone(),
            values,
            grads,
            norm_names: registry.norms.iter().map(|n| n.name.clone()).collect(),
            norms,
        }
    }

    /// Builds a store from externally supplied tensors, checking them against
    /// the registry. Fails on the first parameter whose name or shape differs.
    pub fn from_tensors(
        registry: &ParamRegistry,
        values: Vec<(String, Tensor<T>)>,
        norms: Vec<(String, BatchNormState<T>)>,
    ) -> Result<Self> {
        if values.len() != registry.params.len() {
            let missing = registry
                .params
                .iter()
                .find(|s| values.iter().all(|(n, _)| *n != s.name))
                .map(|s| s.name.clone())
                .unwrap_or_else(|| "<extra parameters>".into());
            return Err(Error::Config(format!(
                "expected {} parameters, found {} (first mismatch: {missing})",
                registry.params.len(),
                values.len()
            )));
        }
        let mut ordered = Vec::with_capacity(values.len());
        for (spec, (name, t)) in registry.params.iter().zip(values) {
            if spec.name != name || spec.shape != *t.shape() {
                return Err(Error::Config(format!(
                    "parameter {} expected shape {}, found {name} with shape {}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            ordered.push(t);
        }
        if norms.len() != registry.norms.len() {
            return Err(Error::Config(format!("expected {} norm layers, found {}", registry.norms.len(), norms.len())));
        }
        let mut states = Vec::with_capacity(norms.len());
        for (spec, (name, s)) in registry.norms.iter().zip(norms) {
            if spec.name != name || s.running_mean.len() != spec.channels || s.running_var.len() != spec.channels {
                return Err(Error::Config(format!("norm layer {} does not match {name}", spec.name)));
            }
            states.push(s);
        }
        Ok(Self::assemble(registry, ordered, states))
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
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn norm_names(&self) -> &[String] {
        &self.norm_names
    }

    pub fn norm(&self, id: NormId) -> &BatchNormState<T> {
        &self.norms[id.0]
    }

    pub fn norms(&self) -> &[BatchNormState<T>] {
        &self.norms
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Disjoint mutable access to values and their accumulated gradients.
    pub(crate) fn values_and_grads(&mut self) -> (&mut [Tensor<T>], &[Tensor<T>]) {
        (&mut self.values, &self.grads)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.specs == other.specs
            && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
            && self.norms.iter().zip(&other.norms).all(|(a, b)| {
                let bits = |v: &[T]| v.iter().map(|x| x.as_f64().to_bits()).collect::<Vec<_>>();
                bits(&a.running_mean) == bits(&b.running_mean) && bits(&a.running_var) == bits(&b.running_var)
            })
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            specs: self.specs.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            norm_names: self.norm_names.clone(),
            norms: self.norms.clone(),
        }
    }
}

/// One forward (and optional backward) pass over a parameter store.
pub struct Session<'a, T> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    track_grads: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Training-mode session: parameters track gradients, batch norm uses
    /// batch statistics and updates its running estimates.
    pub fn train(store: &'a mut ParamStore<T>) -> Self {
        Self::with_mode(store, true, true)
    }

    /// Eval-mode session without gradient tracking.
    pub fn eval(store: &'a mut ParamStore<T>) -> Self {
        Self::with_mode(store, false, false)
    }

    pub fn with_mode(store: &'a mut ParamStore<T>, training: bool, track_grads: bool) -> Self {
        let n = store.len();
        Session { tape: Tape::new(), store, bound: alloc::vec![None; n], training, track_grads }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.values[id.0].clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn batchnorm2d(&mut self, x: Var, gamma: ParamId, beta: ParamId, norm: NormId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        let training = self.training;
        self.tape.batchnorm2d(x, g, b, &mut self.store.norms[norm.0], training)
    }

    /// Backpropagates `loss` and adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        for (i, bound) in self.bound.iter().enumerate() {
            let Some(v) = bound else { continue };
            if let Some(g) = self.tape.grad(*v) {
                for (acc, &d) in self.store.grads[i].data_mut().iter_mut().zip(g.data()) {
                    *acc += d;
                }
            }
        }
        Ok(())
    }
}
