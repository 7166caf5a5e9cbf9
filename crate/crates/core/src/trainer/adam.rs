use ndarray::{Array2, Zip};

use super::backward::Gradients;
use crate::model::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One scalar Adam step with L2 weight decay folded into the gradient.
/// `step` is 1-based. Returns the new parameter.
pub fn adam_update(theta: f64, grad: f64, m: &mut f64, v: &mut f64, step: u64, lr: f64, weight_decay: f64) -> f64 {
    let g = grad + weight_decay * theta;
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / (1.0 - ADAM_BETA1.powf(step as f64));
    let v_hat = *v / (1.0 - ADAM_BETA2.powf(step as f64));
    theta - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
}

/// First and second moments for embeddings and thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_z: Array2<f64>,
    pub v_z: Array2<f64>,
    pub m_b: Array2<f64>,
    pub v_b: Array2<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(p: &ModelParams) -> Self {
        AdamState {
            m_z: Array2::zeros(p.embeddings.raw_dim()),
            v_z: Array2::zeros(p.embeddings.raw_dim()),
            m_b: Array2::zeros(p.beta.raw_dim()),
            v_b: Array2::zeros(p.beta.raw_dim()),
            step: 0,
        }
    }
}

fn step_tensor(theta: &mut Array2<f64>, grad: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, step: u64, lr: f64, wd: f64) {
    Zip::from(theta).and(grad).and(m).and(v).par_for_each(|t, &g, m, v| {
        *t = adam_update(*t, g, m, v, step, lr, wd);
    });
}

/// Mutable training state: parameters, optimizer moments and early-stopping
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub best_val_ndcg: f64,
    pub best_params: ModelParams,
    pub epochs_since_improvement: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        TrainState {
            adam: AdamState::new(&params),
            best_val_ndcg: f64::NEG_INFINITY,
            best_params: params.clone(),
            params,
            epochs_since_improvement: 0,
        }
    }

    /// Applies one Adam step. Thresholds stay fixed when disabled.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) {
        self.adam.step += 1;
        let step = self.adam.step;
        let a = &mut self.adam;
        step_tensor(&mut self.params.embeddings, &grads.embeddings, &mut a.m_z, &mut a.v_z, step, lr, weight_decay);
        if self.params.hyper.use_threshold {
            step_tensor(&mut self.params.beta, &grads.beta, &mut a.m_b, &mut a.v_b, step, lr, weight_decay);
        }
    }
}
