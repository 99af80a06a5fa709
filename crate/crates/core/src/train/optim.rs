use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::model::OptimizerState;
use crate::numcore::nn::ParamStore;
use crate::numcore::Tensor;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: ADAM_EPS,
            weight_decay,
            state: OptimizerState {
                step: 0,
                lr,
                first: zeros(),
                second: zeros(),
            },
        }
    }

    pub fn from_state(state: OptimizerState, weight_decay: f64) -> Self {
        Self {
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: ADAM_EPS,
            weight_decay,
            state,
        }
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    /// One update from the gradients held in `store`:
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.state.first.len() != store.len() {
            bail!(Contract, "optimizer state does not match the parameter store");
        }
        for (name, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at step {}",
                    self.state.step + 1
                )));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let lr = self.state.lr;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let m = self.state.first[i].data_mut();
            let v = self.state.second[i].data_mut();
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = (*w as f64 * decay - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Divides the learning rate after `patience` epochs without a strict
/// improvement of the monitored loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub patience: usize,
    pub factor: f64,
    /// Relative margin a loss must beat the best by to count as improvement.
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            threshold: 1e-6,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn is_improvement(&self, loss: f64) -> bool {
        match self.best {
            None => true,
            Some(best) => loss < best - best.abs() * self.threshold,
        }
    }

    /// Records one epoch's loss and returns the learning rate to use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if self.is_improvement(loss) {
            self.best = Some(loss);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr / self.factor
        } else {
            lr
        }
    }
}
