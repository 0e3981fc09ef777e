//! Named trainable tensors, their optimizer slots, and non-trainable buffers.

use indexmap::IndexMap;

use crate::autodiff::{Gradients, RunningStats, Tape, Var};
use crate::error::{bail, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Index of a batch-norm statistics buffer inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    /// First-moment estimate.
    pub m: Tensor<S>,
    /// Second-moment estimate.
    pub v: Tensor<S>,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<S: Scalar> {
    params: IndexMap<String, Param<S>>,
    buffers: IndexMap<String, RunningStats<S>>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            bail!(Argument, "duplicate parameter name {name:?}");
        }
        let shape = value.shape().to_vec();
        let (idx, _) = self.params.insert_full(
            name,
            Param {
                value,
                grad: None,
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
        Ok(ParamId(idx))
    }

    /// Uniform Glorot initialization for a `[fan_in, fan_out]` matrix.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngState,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| S::lit(rng.uniform_range(-limit, limit)))
            .collect();
        self.add(name, Tensor::new([fan_in, fan_out], data)?)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, stats: RunningStats<S>) -> Result<BufferId> {
        let name = name.into();
        if self.buffers.contains_key(&name) {
            bail!(Argument, "duplicate buffer name {name:?}");
        }
        Ok(BufferId(self.buffers.insert_full(name, stats).0))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &RunningStats<S>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats<S> {
        &self.buffers[id.0]
    }

    pub fn buffer_by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats<S>> {
        self.buffers.get_mut(name)
    }

    /// Mutable view of the buffers, detached from the parameters so a
    /// forward pass can update statistics while parameters are bound.
    pub fn buffers_mut(&mut self) -> Buffers<'_, S> {
        Buffers(&mut self.buffers)
    }

    /// Copy of the buffers, for forward passes that must not touch the
    /// store (concurrent evaluation).
    pub fn snapshot_buffers(&self) -> OwnedBuffers<S> {
        OwnedBuffers(self.buffers.clone())
    }

    /// Records every parameter on `tape`. With `trainable = false` they enter
    /// as constants and no gradients are produced.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> Bound<'t, S> {
        let vars = self
            .params
            .values()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients for bound parameters into the store. Parameters the
    /// loss does not depend on receive zero gradients.
    pub fn load_grads(&mut self, bound: &Bound<'_, S>, grads: &Gradients<S>) {
        for (p, &var) in self.params.values_mut().zip(&bound.vars) {
            p.grad = Some(
                grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())),
            );
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }
}

/// Parameters of a store as variables on one tape.
pub struct Bound<'t, S: Scalar> {
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn get(&self, id: ParamId) -> Var<'t, S> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }
}

/// Mutable access to batch-norm statistics during a forward pass.
pub struct Buffers<'a, S: Scalar>(&'a mut IndexMap<String, RunningStats<S>>);

impl<S: Scalar> Buffers<'_, S> {
    pub fn get_mut(&mut self, id: BufferId) -> &mut RunningStats<S> {
        &mut self.0[id.0]
    }
}

/// Detached copy of a store's buffers.
#[derive(Clone, Debug)]
pub struct OwnedBuffers<S: Scalar>(IndexMap<String, RunningStats<S>>);

impl<S: Scalar> OwnedBuffers<S> {
    pub fn view(&mut self) -> Buffers<'_, S> {
        Buffers(&mut self.0)
    }
}
