//! Optimizers over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the configured rate to ~0 over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

/// Per-parameter optimizer slots. One slot per registered buffer.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    cfg: OptimizerConfig,
    /// First moment (Adam) or velocity (SGD momentum).
    pub m: Vec<Vec<F>>,
    /// Second moment (Adam only).
    pub v: Vec<Vec<F>>,
    /// Per-buffer learning-rate factor. Latent buffers use their resolved
    /// init scale here so the effective step stays proportional to the
    /// coordinate scale of what it updates.
    pub lr_mult: Vec<f64>,
    /// Schedule factor for the current step, set by the trainer.
    pub lr_scale: f64,
    pub t: u64,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimizerConfig, param_sizes: &[usize]) -> Self {
        let m = param_sizes.iter().map(|&n| vec![F::ZERO; n]).collect();
        let v = match cfg {
            OptimizerConfig::Adam { .. } => {
                param_sizes.iter().map(|&n| vec![F::ZERO; n]).collect()
            }
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        let lr_mult = vec![1.0; param_sizes.len()];
        Optimizer { cfg, m, v, lr_mult, lr_scale: 1.0, t: 0 }
    }

    pub fn set_lr_multipliers(&mut self, mults: Vec<f64>) {
        assert_eq!(mults.len(), self.m.len());
        self.lr_mult = mults;
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Rebuild from checkpointed moments.
    pub fn from_parts(cfg: OptimizerConfig, m: Vec<Vec<F>>, v: Vec<Vec<F>>, t: u64) -> Self {
        let lr_mult = vec![1.0; m.len()];
        Optimizer { cfg, m, v, lr_mult, lr_scale: 1.0, t }
    }

    /// Apply one update. `params[i]` and `grads[i]` must have the sizes the
    /// optimizer was built with.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[Vec<F>]) {
        self.t += 1;
        match self.cfg {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let mu = F::from_f64(momentum);
                let wd = F::from_f64(weight_decay);
                for (((p, g), mbuf), &mult) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&self.lr_mult)
                {
                    let lr = F::from_f64(lr * mult * self.lr_scale);
                    for ((pv, &gv), mv) in p.iter_mut().zip(g.iter()).zip(mbuf.iter_mut()) {
                        let g_eff = gv + wd * *pv;
                        *mv = mu * *mv + g_eff;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let b1 = F::from_f64(beta1);
                let b2 = F::from_f64(beta2);
                let eps = F::from_f64(eps);
                let wd = F::from_f64(weight_decay);
                let c1 = F::ONE - F::from_f64(beta1.powi(self.t as i32));
                let c2 = F::ONE - F::from_f64(beta2.powi(self.t as i32));
                for ((((p, g), mbuf), vbuf), &mult) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                    .zip(&self.lr_mult)
                {
                    let lr = F::from_f64(lr * mult * self.lr_scale);
                    for (((pv, &gv), mv), vv) in p
                        .iter_mut()
                        .zip(g.iter())
                        .zip(mbuf.iter_mut())
                        .zip(vbuf.iter_mut())
                    {
                        let g_eff = gv + wd * *pv;
                        *mv = b1 * *mv + (F::ONE - b1) * g_eff;
                        *vv = b2 * *vv + (F::ONE - b2) * g_eff * g_eff;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Scale gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
