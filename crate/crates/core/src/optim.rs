//! First-order optimizers over [`ParameterVector`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ParamEntry, ParamKind, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, `θ ← θ - lr·∇L`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 penalty added to the gradient of convolution weights.
    pub weight_decay: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, weight_decay, beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, weight_decay: 0.0, ..Self::adam(lr, 0.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state for one adaptation run. Entries outside the trainable
/// set are never touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// `(range, decays)` per trainable entry.
    active: Vec<(std::ops::Range<usize>, bool)>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParameterVector, trainable: impl Fn(&ParamEntry) -> bool) -> Self {
        let active = params
            .entries()
            .iter()
            .filter(|e| trainable(e))
            .map(|e| (e.range(), e.kind == ParamKind::Weight))
            .collect();
        let (m, v) = match config.kind {
            OptimizerKind::Adam => (vec![0.0; params.len()], vec![0.0; params.len()]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self { config, active, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParameterVector, grad: &ParameterVector) -> Result<()> {
        params.ensure_same_structure(grad)?;
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let g_all = grad.values();
        let p_all = params.values_mut();
        for (range, decays) in &self.active {
            for i in range.clone() {
                let mut g = g_all[i];
                if *decays && c.weight_decay != 0.0 {
                    g += c.weight_decay * p_all[i];
                }
                match c.kind {
                    OptimizerKind::Sgd => p_all[i] -= c.lr * g,
                    OptimizerKind::Adam => {
                        self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                        self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                        let m_hat = self.m[i] / bc1;
                        let v_hat = self.v[i] / bc2;
                        p_all[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        let diverged = self.active.iter().any(|(range, _)| p_all[range.clone()].iter().any(|v| !v.is_finite()));
        if diverged {
            return Err(Error::Divergence(format!("non-finite parameters after optimizer step {}", self.t)));
        }
        Ok(())
    }
}
