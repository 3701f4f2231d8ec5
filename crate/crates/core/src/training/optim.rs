use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Learning rate for `epoch` (0-based), decaying geometrically from `start`
/// at the first epoch to `end` at the last.
pub fn lr_at(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let frac = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    start * (end / start).powf(frac)
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam {
        step: i32,
        first: Vec<Matrix>,
        second: Vec<Matrix>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[(usize, usize)]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
                Optimizer::Adam {
                    step: 0,
                    first: zeros.clone(),
                    second: zeros,
                }
            }
        }
    }

    /// Applies one descent step in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per tensor");
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *w -= lr * d;
                    }
                }
            }
            Optimizer::Adam { step, first, second } => {
                *step += 1;
                let c1 = 1.0 - BETA1.powi(*step);
                let c2 = 1.0 - BETA2.powi(*step);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = first[i].as_mut_slice();
                    let v = second[i].as_mut_slice();
                    for (k, (w, d)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * d;
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * d * d;
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
