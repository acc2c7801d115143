use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::nn::ParamSet;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; gradients above it are rescaled.
    pub clip: f64,
}

/// Adam with global-norm gradient clipping over one parameter group.
pub struct Adam {
    pub config: AdamConfig,
    params: ParamSet,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    pub(crate) step: u64,
}

pub struct StepInfo {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl Adam {
    pub fn new(params: ParamSet, config: AdamConfig) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let m = params.vars().iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { config, params, m, v, step: 0 })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the group's gradients in `grads`; missing
    /// gradients count as zero.
    pub fn step(&mut self, grads: &GradStore) -> Result<StepInfo> {
        let vars = self.params.vars();
        let gs: Vec<Tensor> = vars
            .iter()
            .map(|v| match grads.get(v.as_tensor()) {
                // Backward-pass gradients keep their op history; detach so the
                // moment estimates do not chain graphs across steps.
                Some(g) => Ok(g.detach()),
                None => v.as_tensor().zeros_like(),
            })
            .collect::<candle_core::Result<_>>()?;
        let mut sq = 0.0f64;
        for g in &gs {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        let scale = if norm > self.config.clip { self.config.clip / norm } else { 1.0 };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (var, g)) in vars.iter().zip(gs).enumerate() {
            let g = (g * scale)?;
            self.m[i] = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            self.v[i] = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (delta * c.lr)?)?)?;
        }
        Ok(StepInfo { grad_norm: norm })
    }
}
