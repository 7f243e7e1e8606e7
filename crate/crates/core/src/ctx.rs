//! Binds model weights into a [`Graph`] on first use.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::weights::ModelWeights;

/// A recording graph plus the weights it reads from.
///
/// In training mode every bound weight is a trainable leaf. In inference mode
/// weights are constants and [`Ctx::segment`] may drop the tape to bound
/// memory on large frames.
pub struct Ctx<'w, T: Real> {
    pub g: Graph<T>,
    weights: &'w ModelWeights,
    bound: BTreeMap<String, Var>,
    train: bool,
    slope: T,
}

impl<'w, T: Real> Ctx<'w, T> {
    pub fn new(weights: &'w ModelWeights, train: bool, slope: f64) -> Self {
        Self {
            g: Graph::new(),
            weights,
            bound: BTreeMap::new(),
            train,
            slope: T::lit(slope),
        }
    }

    pub fn w(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.weights.get(name)?.cast::<T>();
        let v = self.g.leaf(t, self.train);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to `value` instead of the stored weight, keeping the
    /// precision of `T`.
    pub fn bind(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        let stored = self.weights.get(name)?;
        if stored.dims() != value.dims() {
            return Err(Error::NamedShape {
                name: name.into(),
                expected: stored.dims().to_vec(),
                found: value.dims().to_vec(),
            });
        }
        let v = self.g.leaf(value, self.train);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `prefix.weight` / `prefix.bias` convolution, optionally followed by
    /// leaky ReLU.
    pub fn conv(&mut self, x: Var, prefix: &str, groups: usize, act: bool) -> Result<Var> {
        let w = self.w(&format!("{prefix}.weight"))?;
        let b = self.w(&format!("{prefix}.bias"))?;
        let y = self.g.conv2d(x, w, Some(b), groups)?;
        if act {
            self.g.leaky_relu(y, self.slope)
        } else {
            Ok(y)
        }
    }

    /// Inference only: restarts the tape, carrying the listed variables
    /// over as constants. A no-op while training.
    pub fn segment(&mut self, live: &mut [&mut Var]) {
        if self.train {
            return;
        }
        let old = std::mem::take(&mut self.g);
        let values: Vec<_> = live.iter().map(|v| old.value(**v).clone()).collect();
        drop(old);
        self.bound.clear();
        for (v, t) in live.iter_mut().zip(values) {
            **v = self.g.constant(t);
        }
    }

    /// Gradients of every bound weight after a backward pass.
    pub fn weight_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.g.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}
