//! Trainable networks: the generators, the patch discriminator, and the contrastive projection
//! heads, all expressed as ops on an autograd [`Tape`].

mod discriminator;
mod generator;
mod heads;

pub use discriminator::{discriminate, Discriminator, DiscriminatorSpec};
pub use generator::{encode_features, transfer, transfer_bands, FeatureStack, Generator, GeneratorSpec, OutputKind};
pub use heads::ProjectionHeads;

use fs2ffpe_autograd::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Name of the first tensor containing a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names.iter().zip(&self.values).find(|(_, v)| !v.is_finite()).map(|(n, _)| n.as_str())
    }

    /// Replaces all values; names and shapes must match exactly.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor<T>>) -> Result<()> {
        if names != self.names.as_slice() || values.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter layout mismatch: expected {:?}, found {:?}",
                self.names, names
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    self.names[i],
                    v.shape(),
                    self.values[i].shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound(vars)
    }

    /// Fills every tensor with `v` (used by tests of degenerate networks).
    pub fn fill(&mut self, v: f64) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|x| *x = T::lit(v));
        }
    }
}

/// Tape handles of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles supplied by the caller, e.g. leaves created for finite-difference checks; the
    /// order must match the owning set.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub(crate) fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Collects the gradients of a bound parameter set, `None` where no gradient arrived.
pub fn gradients_of<T: Real>(grads: &fs2ffpe_autograd::Gradients<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound.vars().iter().map(|&v| grads.get(v).cloned()).collect()
}

pub(crate) fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// A convolution's parameter slots and stride/padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayer {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.push(format!("{name}.weight"), normal_tensor(&[c_out, c_in, k, k], std, rng));
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p.at(self.w), Some(p.at(self.b)), self.stride, self.pad)?)
    }
}
