//! Named parameter storage and the AdamW update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Trainable tensors by name, plus AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, Moments<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let [r, c] = value.shape();
        self.moments.insert(
            name.clone(),
            Moments {
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            },
        );
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.cast());
        }
        out
    }

    /// Overwrites one coordinate; used by finite-difference checks.
    pub fn set_coord(&mut self, name: &str, index: usize, value: T) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        t.data_mut()[index] = value;
        Ok(())
    }

    /// One AdamW step with decoupled weight decay.
    ///
    /// `grads` must hold a gradient for every parameter. Nothing is modified
    /// if any gradient is non-finite or mis-shaped.
    pub fn adamw_step(&mut self, grads: &Gradients<T>, cfg: &AdamWConfig) -> Result<()> {
        for (name, p) in &self.params {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("`{name}`: grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let one = T::one();
        let bias1 = one - T::of(cfg.beta1.powi(t));
        let bias2 = one - T::of(cfg.beta2.powi(t));
        let lr = T::of(cfg.lr);
        let decay = T::of(cfg.lr * cfg.weight_decay);
        let eps = T::of(cfg.eps);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name)?;
            let mom = self.moments.get_mut(name).expect("moments track params");
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *w = *w - decay * *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
        let total: f64 = grads
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if total > max_norm && total > 0.0 {
            let s = T::of(max_norm / total);
            grads.scale(s);
        }
        total
    }

    /// First and second moment estimates of one parameter.
    pub fn moments(&self, name: &str) -> Result<(&Tensor<T>, &Tensor<T>)> {
        self.moments
            .get(name)
            .map(|m| (&m.m, &m.v))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Rebuilds a set with optimizer state, e.g. from a checkpoint.
    pub fn restore(
        entries: impl IntoIterator<Item = (String, Tensor<T>, Tensor<T>, Tensor<T>)>,
        step: u64,
    ) -> Result<Self> {
        let mut out = Self::new();
        for (name, value, m, v) in entries {
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::shape(
                    "restore",
                    format!("moments of `{name}` do not match {:?}", value.shape()),
                ));
            }
            out.moments.insert(name.clone(), Moments { m, v });
            out.params.insert(name, value);
        }
        out.step = step;
        Ok(out)
    }
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn scale(&mut self, s: T) {
        for t in self.values_mut() {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }
}
