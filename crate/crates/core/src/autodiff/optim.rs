use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent with L2 weight decay.
    Sgd,
    /// Adam with decoupled weight decay.
    #[default]
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
}

// Plain SGD at 1e-4 barely moves a 64-wide model in 60 epochs, so the
// default is AdamW; `paper()` keeps the original schedule.
impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate: 7e-4,
            weight_decay: 1e-4,
            lr_drop_epoch: 50,
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// SGD at 1e-4, dropped tenfold at epoch 40.
    pub fn paper() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e-4,
            lr_drop_epoch: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::Config(format!(
                "weight_decay must lie in [0, 1), got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Step size in force during `epoch` (0-based).
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

fn require_grads(store: &ParamStore) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::Usage(format!("parameter {:?} has no gradient", p.name)));
    }
    Ok(())
}

/// `w <- w - lr * (grad + weight_decay * w)`, then zeroes every gradient.
pub fn sgd_step(store: &mut ParamStore, config: &OptimizerConfig, epoch: usize) -> Result<()> {
    config.validate()?;
    require_grads(store)?;
    let lr = config.effective_lr(epoch);
    let wd = config.weight_decay;
    for p in store.iter_mut() {
        let grad = p.tensor.grad_mut().expect("checked above");
        let g = std::mem::take(grad);
        for (w, gi) in p.tensor.data_mut().iter_mut().zip(&g) {
            *w -= lr * (gi + wd * *w);
        }
        *p.tensor.grad_mut().expect("checked above") = g;
        p.tensor.zero_grad();
    }
    Ok(())
}

/// First and second moment buffers for [`adamw_step`].
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    config: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    config.validate()?;
    require_grads(store)?;
    if state.m.len() != store.len() {
        state.m = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let lr = config.effective_lr(epoch);
    let wd = config.weight_decay;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let g = std::mem::take(p.tensor.grad_mut().expect("checked above"));
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
            *w -= lr * (update + wd * *w);
        }
        *p.tensor.grad_mut().expect("checked above") = g;
        p.tensor.zero_grad();
    }
    Ok(())
}

/// Gives every parameter without a gradient a zero buffer.
pub fn ensure_grads(store: &mut ParamStore) {
    for p in store.iter_mut() {
        if p.tensor.grad().is_none() {
            let zeros = vec![0.0; p.tensor.len()];
            p.tensor.accumulate_grad(&zeros);
        }
    }
}

/// Rescales the gradients of `ids` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let total: f64 = ids
        .iter()
        .filter_map(|&id| store.get(id).tensor.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for &id in ids {
            if let Some(g) = store.get_mut(id).tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}
