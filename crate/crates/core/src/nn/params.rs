use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::Grads;
use super::Real;
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Named parameter tensors with per-tensor trainable flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    trainable: Vec<bool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Array2<T>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(true);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id] = on;
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.trainable.iter_mut().for_each(|t| *t = on);
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of(x.f64())))
                .collect(),
            trainable: self.trainable.clone(),
        }
    }

    pub fn to_stored(&self) -> StoredParams {
        StoredParams {
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, v)| StoredTensor {
                    name: name.clone(),
                    shape: [v.nrows(), v.ncols()],
                    values: v.iter().map(|x| x.f64() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn from_stored(stored: &StoredParams) -> Result<Self> {
        let mut store = Self::new();
        for t in &stored.tensors {
            let v = Array2::from_shape_vec(
                (t.shape[0], t.shape[1]),
                t.values.iter().map(|&x| T::of(x as f64)).collect(),
            )
            .map_err(|e| Error::Shape(format!("tensor {}: {e}", t.name)))?;
            store.add(&t.name, v);
        }
        Ok(store)
    }
}

/// Serialized parameter tensors, row-major 32-bit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParams {
    pub tensors: Vec<StoredTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f32>,
}

/// Adam with optional per-parameter learning-rate multipliers.
pub struct Adam<T> {
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Option<Array2<T>>>,
    v: Vec<Option<Array2<T>>>,
    multipliers: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, num_params: usize) -> Self {
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
            multipliers: vec![T::one(); num_params],
        }
    }

    pub fn set_multiplier(&mut self, id: ParamId, mult: T) {
        self.multipliers[id] = mult;
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for id in 0..store.len() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let m = self.m[id].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[id].get_or_insert_with(|| Array2::zeros(g.dim()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let lr = self.lr * self.multipliers[id];
            ndarray::Zip::from(store.value_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
