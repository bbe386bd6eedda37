use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<Array2<f64>>,
        v: Vec<Array2<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<_> = params
                    .iter()
                    .map(|(_, _, t)| Array2::zeros(t.raw_dim()))
                    .collect();
                Optimizer::Adam {
                    lr,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.tensors_mut().zip(grads.iter()) {
                    p.scaled_add(-*lr, g);
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .zip(grads.iter())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    ndarray::Zip::from(p)
                        .and(g)
                        .and(m)
                        .and(v)
                        .for_each(|p, &g, m, v| {
                            *m = *beta1 * *m + (1.0 - *beta1) * g;
                            *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                            *p -= *lr * (*m / c1) / ((*v / c2).sqrt() + *eps);
                        });
                }
            }
        }
    }
}
