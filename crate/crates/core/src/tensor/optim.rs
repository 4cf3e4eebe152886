use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

pub trait Optimizer {
    /// Applies one update for the given `(parameter index, gradient)` pairs.
    fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, `p ← p − lr·g`.
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd { lr }),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)]) {
        if self.lr == 0.0 {
            return;
        }
        for (i, g) in grads {
            let p = store.get_mut(*i);
            assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
            for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v -= self.lr * d;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: HashMap<usize, u64>,
    moments: HashMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: HashMap::new(),
            moments: HashMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)]) {
        for (i, g) in grads {
            let p = store.get_mut(*i);
            assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
            let t = self.steps.entry(*i).or_insert(0);
            *t += 1;
            let (m, v) = self
                .moments
                .entry(*i)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            for (k, (val, d)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * d;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * d * d;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *val -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
