use serde::{Deserialize, Serialize};

use super::network::Grads;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Optimizer choice with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
    RmsProp { rho: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn build<T: Real>(&self, lr: f64) -> Optimizer<T> {
        Optimizer {
            kind: self.clone(),
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// Stateful first-order optimizer over a parameter list in a fixed order.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &Grads<T>) -> Result<()> {
        if params.len() != grads.0.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.0.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let lr = T::lit(self.lr);
        for (i, (p, g)) in params.into_iter().zip(&grads.0).enumerate() {
            p.check_same_shape(g)?;
            let (p, g) = (p.data_mut(), g.data());
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let c1 = T::lit(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::lit(1.0 - beta2.powi(self.step as i32));
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        p[j] -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
                OptimizerKind::RmsProp { rho, eps } => {
                    let (r, e) = (T::lit(rho), T::lit(eps));
                    let v = &mut self.second[i];
                    for j in 0..p.len() {
                        v[j] = r * v[j] + (T::one() - r) * g[j] * g[j];
                        p[j] -= lr * g[j] / (v[j].sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}
