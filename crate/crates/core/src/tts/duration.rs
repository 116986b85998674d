//! Adversarial duration predictor: a noise-driven generator of per-position
//! log-durations and a discriminator over (durations, text features).

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvOpts, LayerNorm, Scope};

#[derive(Debug, Clone)]
struct ConvStack {
    convs: Vec<Conv1d>,
    norms: Vec<LayerNorm>,
    proj: Conv1d,
}

impl ConvStack {
    fn new(vs: &Scope, c_in: usize, hidden: usize, layers: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..layers {
            let c = if i == 0 { c_in } else { hidden };
            convs.push(Conv1d::new(
                &vs.pp(format!("convs.{i}")),
                c,
                hidden,
                3,
                ConvOpts::same(3, 1),
            )?);
            norms.push(LayerNorm::new(&vs.pp(format!("norms.{i}")), hidden)?);
        }
        Ok(Self {
            convs,
            norms,
            proj: Conv1d::new(&vs.pp("proj"), hidden, 1, 1, ConvOpts::default())?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mut x = x.broadcast_mul(mask)?;
        for (c, n) in self.convs.iter().zip(&self.norms) {
            x = n
                .forward_channels(&c.forward(&x)?.relu()?)?
                .broadcast_mul(mask)?;
        }
        Ok(self.proj.forward(&x)?.broadcast_mul(mask)?)
    }
}

/// `(h, z_d)` -> log-durations `(B, 1, L)`.
#[derive(Debug, Clone)]
pub struct DurationGenerator {
    net: ConvStack,
    noise_dim: usize,
}

impl DurationGenerator {
    pub fn new(vs: &Scope, text_dim: usize, noise_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            net: ConvStack::new(vs, text_dim + noise_dim, hidden, 2)?,
            noise_dim,
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// `h`: `(B, d, L)`, `z_d`: `(B, noise_dim, L)`, `mask`: `(B, 1, L)`.
    pub fn forward(&self, h: &Tensor, z_d: &Tensor, mask: &Tensor) -> Result<Tensor> {
        if z_d.dim(1)? != self.noise_dim || z_d.dim(2)? != h.dim(2)? {
            return Err(Error::Dimension(format!(
                "duration noise {:?} does not match ({}, {})",
                z_d.dims(),
                self.noise_dim,
                h.dim(2)?
            )));
        }
        self.net.forward(&Tensor::cat(&[h, z_d], 1)?, mask)
    }
}

/// `(d, h)` -> per-position realness scores `(B, 1, L)`.
#[derive(Debug, Clone)]
pub struct DurationDiscriminator {
    net: ConvStack,
}

impl DurationDiscriminator {
    pub fn new(vs: &Scope, text_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            net: ConvStack::new(vs, text_dim + 1, hidden, 2)?,
        })
    }

    pub fn forward(&self, d: &Tensor, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.net.forward(&Tensor::cat(&[d, h], 1)?, mask)
    }
}

/// `sum(x * mask) / sum(mask)`; `mask` broadcasts against `x`.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.broadcast_as(x.shape())?;
    Ok((x * &m)?.sum_all()?.broadcast_div(&m.sum_all()?)?)
}

pub fn duration_disc_loss(real: &Tensor, fake: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let r = masked_mean(&real.affine(1.0, -1.0)?.sqr()?, mask)?;
    let f = masked_mean(&fake.sqr()?, mask)?;
    Ok((r + f)?)
}

#[derive(Debug, Clone)]
pub struct DurationGenLoss {
    pub total: Tensor,
    pub adv: Tensor,
    pub mse: Tensor,
}

pub fn duration_gen_loss(
    fake: &Tensor,
    d_hat: &Tensor,
    d: &Tensor,
    mask: &Tensor,
    lambda_dp: f64,
) -> Result<DurationGenLoss> {
    if d_hat.dims() != d.dims() {
        return Err(Error::Dimension(format!(
            "d_hat {:?} vs d {:?}",
            d_hat.dims(),
            d.dims()
        )));
    }
    let adv = masked_mean(&fake.affine(1.0, -1.0)?.sqr()?, mask)?;
    let mse = masked_mean(&(d_hat - d)?.sqr()?, mask)?;
    let total = (&adv + (&mse * lambda_dp)?)?;
    Ok(DurationGenLoss { total, adv, mse })
}
