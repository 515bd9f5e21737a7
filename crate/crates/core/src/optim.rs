//! First-order optimisers updating a [`ParamStore`] in place between passes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd_momentum" | "sgd" => Some(OptimizerKind::SgdMomentum),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, store: &ParamStore) -> Self {
        let zeros = || store.tensors().map(|t| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Optimizer {
            kind,
            learning_rate,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; `grads[i]` belongs to the i-th parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.first.len() || store.len() != grads.len() {
            return Err(Error::shape("optimizer", &[store.len()], &[grads.len()]));
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((t, g), vel) in store.tensors_mut().zip(grads).zip(&mut self.first) {
                    for ((w, gi), v) in t.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                        *v = self.momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.momentum;
                let b2 = self.beta2;
                let c1 = 1.0 - libm::pow(b1, self.steps as f64);
                let c2 = 1.0 - libm::pow(b2, self.steps as f64);
                for (((t, g), m), v) in store
                    .tensors_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *w -= lr * (*mi / c1) / (libm::sqrt(*vi / c2) + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([2], vec![3.0, -2.0]).unwrap());
        s
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut s = quadratic_store();
            let before = s.clone();
            let mut opt = Optimizer::new(kind, 0.0, &s);
            for _ in 0..5 {
                opt.step(&mut s, &[vec![1.0, -4.0]]).unwrap();
            }
            assert_eq!(s, before);
        }
    }

    #[test]
    fn both_optimizers_minimise_a_quadratic() {
        for (kind, lr) in [(OptimizerKind::Adam, 0.1), (OptimizerKind::SgdMomentum, 0.05)] {
            let mut s = quadratic_store();
            let mut opt = Optimizer::new(kind, lr, &s);
            for _ in 0..500 {
                let g: Vec<f64> = s.tensors().next().unwrap().data().iter().map(|w| 2.0 * w).collect();
                opt.step(&mut s, &[g]).unwrap();
            }
            assert!(s.tensors().next().unwrap().data().iter().all(|w| w.abs() < 1e-2), "{kind:?}");
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0, 4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0][0], 0.3);
    }
}
