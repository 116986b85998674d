//! AdamW with decoupled weight decay and a per-epoch exponential schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::NamedTensor;
use crate::error::{Error, Result};

/// Optimizer hyper-parameters. The initial rate is `2e-4`; the source
/// material prints it as "2 x 10^4", read here as a dropped minus sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    /// Global gradient-norm ceiling; no clipping when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
            weight_decay: 0.01,
            lr_decay: 0.999,
            max_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.max_grad_norm.is_none_or(|n| n > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.lr * self.lr_decay.powf(epoch as f64)
    }
}

pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    lr: f64,
    cfg: OptimizerConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            step: 0,
            lr: cfg.lr,
            cfg,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.lr = self.cfg.lr_at_epoch(epoch);
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Global L2 norm of the gradients held for this optimizer's parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Parameters without a gradient in `grads` are left as is.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let scale = match self.cfg.max_grad_norm {
            Some(max) => {
                let norm = self.grad_norm(grads)?;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(self.step as f64);
        let bc2 = 1.0 - b2.powf(self.step as f64);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale < 1.0 {
                (g.detach() * scale)?
            } else {
                g.detach()
            };
            let m = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / v_hat.sqrt()?.affine(1.0, self.cfg.eps)?)?;
            let decayed = (var.as_tensor().detach() * (1.0 - self.lr * self.cfg.weight_decay))?;
            var.set(&(decayed - (update * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment estimates as named tensors, `"<prefix>.m.<param>"` and
    /// `"<prefix>.v.<param>"`.
    pub fn export_state(&self, prefix: &str) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push(NamedTensor::from_tensor(
                format!("{prefix}.m.{name}"),
                &self.m[i],
            )?);
            out.push(NamedTensor::from_tensor(
                format!("{prefix}.v.{name}"),
                &self.v[i],
            )?);
        }
        Ok(out)
    }

    pub fn import_state(&mut self, prefix: &str, tensors: &[NamedTensor], step: u64) -> Result<()> {
        let lookup = |key: String| {
            tensors
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| Error::Format(format!("missing optimizer tensor `{key}`")))
        };
        for (i, (name, var)) in self.params.iter().enumerate() {
            let dtype = var.dtype();
            let device = var.device();
            let m = lookup(format!("{prefix}.m.{name}"))?;
            let v = lookup(format!("{prefix}.v.{name}"))?;
            if m.shape != var.dims() || v.shape != var.dims() {
                return Err(Error::ShapeMismatch(vec![format!(
                    "{prefix} state for {name}"
                )]));
            }
            self.m[i] = m.to_tensor(dtype, device)?;
            self.v[i] = v.to_tensor(dtype, device)?;
        }
        self.step = step;
        Ok(())
    }
}
