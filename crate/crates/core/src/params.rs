//! Named parameter storage.
//!
//! Values are computed in `f64` but always held at `f32` precision so a
//! checkpoint (which stores little-endian `f32`) reproduces the in-memory
//! model exactly.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::graph::{Grads, Tape, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

pub fn to_storage(x: f64) -> f64 {
    x as f32 as f64
}

/// Gaussian matrix with the given standard deviation.
pub fn gaussian(rng: &mut Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.mapv(to_storage));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    /// Replaces a value, rounding it to storage precision.
    pub fn set(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(value.dim(), self.values[id.0].dim(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value.mapv(to_storage);
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.ids().map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Puts the parameter on a tape.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, &self.values[id.0])
    }

    pub fn round_to_storage(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(to_storage);
        }
    }
}

/// Accumulates per-sample gradients in a fixed order.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub grads: Vec<Array2<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.values.iter().map(|v| Array2::zeros(v.dim())).collect() }
    }

    pub fn accumulate(&mut self, grads: &Grads, weight: f64) {
        for (id, g) in grads.params() {
            self.grads[id.0].scaled_add(weight, g);
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}
