//! First-order optimizers over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::nn::NetworkParams;

pub const SGD_MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball SGD with momentum 0.9.
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        for (id, tensor) in params.tensors.iter_mut() {
            let Some(grad) = grads.get(id) else { continue };
            let w = tensor.data_mut();
            let g = grad.data();
            let m = self.first.entry(id.clone()).or_insert_with(|| vec![0.0; w.len()]);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for i in 0..w.len() {
                        let gi = g[i] + self.weight_decay * w[i];
                        m[i] = SGD_MOMENTUM * m[i] + gi;
                        w[i] -= lr * m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(id.clone()).or_insert_with(|| vec![0.0; w.len()]);
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for i in 0..w.len() {
                        let gi = g[i] + self.weight_decay * w[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
