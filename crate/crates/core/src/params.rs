//! Named parameter storage and the Adam optimizer.

use std::collections::HashSet;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialised matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Overwrites values from `(name, value)` pairs. Every parameter must be
    /// supplied exactly once with a matching shape.
    pub fn load_named(&mut self, named: Vec<(String, Array2<f64>)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if self.values[i].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters in `frozen`, and those without a
    /// gradient, are left bit-for-bit untouched.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore,
        grads: impl IntoIterator<Item = (ParamId, &'a Array2<f64>)>,
        frozen: &HashSet<ParamId>,
    ) {
        let mut grads: Vec<(ParamId, &Array2<f64>)> =
            grads.into_iter().filter(|(id, _)| !frozen.contains(id)).collect();
        grads.sort_by_key(|(id, _)| *id);
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads {
            let i = id.0;
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                });
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(&mut store.values[i])
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}
