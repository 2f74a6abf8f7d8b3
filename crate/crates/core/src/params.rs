//! Named parameter storage, initialization and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::{s, Scalar};
use crate::tensor::{SerialTensor, Tensor};
use crate::GvqgError;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a new tensor. Panics on duplicate names, which would be a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Scaled-normal initialization with the given standard deviation.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| s::<T>(normal.sample(rng)))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::full(rows, cols, T::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
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

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn to_serial(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| NamedTensor {
                name: n.clone(),
                tensor: v.to_serial(),
            })
            .collect()
    }

    /// Overwrites every parameter from `named`, validating names and shapes.
    pub fn load_serial(&mut self, named: &[NamedTensor]) -> Result<(), GvqgError> {
        if named.len() != self.values.len() {
            return Err(GvqgError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.values.len()
            )));
        }
        for nt in named {
            let id = self.id(&nt.name).ok_or_else(|| {
                GvqgError::Checkpoint(format!("unknown parameter {}", nt.name))
            })?;
            let current = &self.values[id.0];
            if (nt.tensor.rows, nt.tensor.cols) != current.shape() {
                return Err(GvqgError::Checkpoint(format!(
                    "parameter {} has shape {}x{}, model expects {}x{}",
                    nt.name,
                    nt.tensor.rows,
                    nt.tensor.cols,
                    current.rows(),
                    current.cols()
                )));
            }
            self.values[id.0] = nt.tensor.to_tensor()?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: SerialTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `(id, grad)` pairs; parameters without a
    /// gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let mut scale = 1.0;
        if self.cfg.clip_norm > 0.0 {
            let norm: f64 = grads
                .iter()
                .flat_map(|(_, g)| g.data().iter())
                .map(|v| {
                    let f = v.to_f64_lossy();
                    f * f
                })
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let lr = s::<T>(self.cfg.lr * bc2.sqrt() / bc1);
        let b1 = s::<T>(self.cfg.beta1);
        let b2 = s::<T>(self.cfg.beta2);
        let one = T::one();
        let eps = s::<T>(self.cfg.eps);
        let scale = s::<T>(scale);
        for (id, g) in grads {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * scale;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new();
        a.add_normal("w", 2, 3, 0.02, &mut rng);
        let mut b = ParamStore::<f32>::new();
        b.add_normal("w", 3, 2, 0.02, &mut rng);
        assert!(b.load_serial(&a.to_serial()).is_err());
        let mut c = ParamStore::<f32>::new();
        c.add_zeros("w", 2, 3);
        c.load_serial(&a.to_serial()).unwrap();
        assert_eq!(c.get(ParamId(0)), a.get(ParamId(0)));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let g = store.get(id).map(|v| 2.0 * v);
            opt.update(&mut store, &[(id, g)]);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
