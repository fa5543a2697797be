//! Named parameter storage and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tape::{Tape, Var};

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor; returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index(name).map(move |i| &mut self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Register every tensor on the tape as a trainable leaf.
    pub fn to_tape(&self, t: &Tape) -> Vec<Var> {
        self.values.iter().map(|m| t.param(m.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|m| m.is_finite())
    }
}

/// Adam with bias correction. `step` *descends* along the given gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Mat]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
        }
    }

    /// Update the tensors selected by `active` (all when `None`).
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], active: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / c1;
                let vh = v.data[j] / c2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Mat::col(vec![3.0, -2.0])];
        let mut opt = Adam::new(0.1, &p);
        for _ in 0..500 {
            let g = p[0].scale(2.0);
            opt.step(&mut p, &[g], None);
        }
        assert!(p[0].max_abs() < 1e-2);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = vec![Mat::col(vec![3.0])];
        let mut opt = Adam::new(0.0, &p);
        opt.step(&mut p, &[Mat::col(vec![1.0])], None);
        assert_eq!(p[0].item(), 3.0);
    }
}
