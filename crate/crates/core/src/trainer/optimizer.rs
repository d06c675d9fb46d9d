use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub rho: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            lr: 1e-3,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(format!("rho must be in [0, 1), got {}", self.rho));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(format!("eps must be >= 0, got {}", self.eps));
        }
        Ok(())
    }
}

/// RMSProp state for one task: a moving average of squared gradients per
/// parameter it has touched.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub mean_square: BTreeMap<String, Tensor>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            mean_square: BTreeMap::new(),
            steps: 0,
        }
    }

    /// `s <- rho s + (1 - rho) g^2`, returns `-lr g / (sqrt(s) + eps)`.
    ///
    /// Where the denominator is exactly zero (only possible with `eps = 0`
    /// and `g = 0` throughout), the delta is zero.
    pub fn apply(&mut self, grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
        let OptimizerConfig { rho, lr, eps } = self.config;
        let mut deltas = BTreeMap::new();
        for (name, g) in grads {
            let s = self
                .mean_square
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let mut delta = Tensor::zeros(g.shape());
            for ((sv, &gv), d) in s.data_mut().iter_mut().zip(g.data()).zip(delta.data_mut()) {
                *sv = rho * *sv + (1.0 - rho) * gv * gv;
                let denom = sv.sqrt() + eps;
                *d = if denom == 0.0 { 0.0 } else { -lr * gv / denom };
            }
            deltas.insert(name.clone(), delta);
        }
        self.steps += 1;
        deltas
    }
}

/// Free-function form of [`OptimizerState::apply`].
pub fn rmsprop_apply(opt: &mut OptimizerState, mean_grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    opt.apply(mean_grads)
}
