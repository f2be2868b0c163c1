//! Variance-rectified Adam wrapped in lookahead.

use serde::{Deserialize, Serialize};

use crate::error::{PecadError, Result};
use crate::nets::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RangerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    /// Rectified updates start once the approximated SMA length exceeds this.
    pub rectify_threshold: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
            rectify_threshold: 5.0,
        }
    }
}

impl RangerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lookahead_k >= 1
            && self.lookahead_alpha > 0.0
            && self.lookahead_alpha < 1.0;
        if ok {
            Ok(())
        } else {
            Err(PecadError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: adaptive moments for the fast weights and a slow copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranger {
    config: RangerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    slow: Vec<Vec<f64>>,
}

impl Ranger {
    pub fn new(params: &[Tensor], config: RangerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            slow: params.iter().map(|p| p.data().to_vec()).collect(),
            config,
            step: 0,
        })
    }

    pub fn config(&self) -> &RangerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn slow_weights(&self) -> &[Vec<f64>] {
        &self.slow
    }

    /// One inner update; every `lookahead_k` steps the slow weights move
    /// toward the fast ones and the fast weights are reset onto them.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(PecadError::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let t = self.step + 1;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.numel() != p.numel() {
                return Err(PecadError::Shape(format!("parameter {i}: shape changed or gradient mismatched")));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(PecadError::NonFinite(format!("gradient of parameter {i} at step {t}")));
            }
        }
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let tf = t as f64;
        let b1t = b1.powf(tf);
        let b2t = b2.powf(tf);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * tf * b2t / (1.0 - b2t);
        let rect = (rho_t > c.rectify_threshold).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr + c.weight_decay * *w;
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let m_hat = *mi / (1.0 - b1t);
                match rect {
                    Some(r) => {
                        let v_hat = (*vi / (1.0 - b2t)).sqrt();
                        *w -= c.lr * r * m_hat / (v_hat + c.eps);
                    }
                    None => *w -= c.lr * m_hat,
                }
            }
        }
        self.step = t;
        if t % c.lookahead_k as u64 == 0 {
            let a = c.lookahead_alpha;
            for (p, slow) in params.iter_mut().zip(self.slow.iter_mut()) {
                for (w, s) in p.data_mut().iter_mut().zip(slow.iter_mut()) {
                    *s += a * (*w - *s);
                    *w = *s;
                }
            }
        }
        Ok(())
    }
}
