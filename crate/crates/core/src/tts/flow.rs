//! Affine coupling flows with a residual transformer block inside each
//! coupling network.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvOpts, Init, Linear, Scope, TransformerLayer, WaveNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub channels: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub wn_layers: usize,
    pub heads: usize,
    /// Feed-forward width of the transformer block.
    pub transformer_dim: usize,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "flow channel count {} must be even and positive",
                self.channels
            )));
        }
        if self.blocks == 0 || self.hidden == 0 || self.wn_layers == 0 || self.transformer_dim == 0
        {
            return Err(Error::Config("flow sizes must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("flow kernel must be odd".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(
                "flow hidden width must divide into heads".into(),
            ));
        }
        Ok(())
    }
}

/// `h + out(layer(h))` with `out` zero-initialized.
#[derive(Debug, Clone)]
struct ResidualTransformer {
    layer: TransformerLayer,
    out: Linear,
}

impl ResidualTransformer {
    fn new(vs: &Scope, width: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            layer: TransformerLayer::new(&vs.pp("layer"), width, heads, ffn)?,
            out: Linear::with_init(&vs.pp("out"), width, width, Init::Zeros)?,
        })
    }

    /// `h`: `(B, C, T)`, `mask`: `(B, 1, T)`.
    fn forward(&self, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = h.transpose(1, 2)?;
        let row = mask.transpose(1, 2)?;
        let attn_mask = mask.transpose(1, 2)?.broadcast_mul(mask)?.unsqueeze(1)?;
        let y = self.layer.forward(&x, Some(&attn_mask), Some(&row))?;
        let y = self.out.forward(&y)?.broadcast_mul(&row)?;
        Ok((h + y.transpose(1, 2)?)?)
    }
}

#[derive(Debug, Clone)]
struct Coupling {
    pre: Conv1d,
    transformer: ResidualTransformer,
    wn: WaveNet,
    post: Conv1d,
    half: usize,
}

impl Coupling {
    fn new(vs: &Scope, cfg: &FlowConfig, cond_channels: usize) -> Result<Self> {
        let half = cfg.channels / 2;
        Ok(Self {
            pre: Conv1d::new(&vs.pp("pre"), half, cfg.hidden, 1, ConvOpts::default())?,
            transformer: ResidualTransformer::new(
                &vs.pp("transformer"),
                cfg.hidden,
                cfg.heads,
                cfg.transformer_dim,
            )?,
            wn: WaveNet::new(
                &vs.pp("wn"),
                cfg.hidden,
                cfg.kernel,
                1,
                cfg.wn_layers,
                cond_channels,
            )?,
            post: Conv1d::new(
                &vs.pp("post"),
                cfg.hidden,
                2 * half,
                1,
                ConvOpts::default().zero_init(),
            )?,
            half,
        })
    }

    fn stats(&self, x0: &Tensor, mask: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let h = self.pre.forward(x0)?.broadcast_mul(mask)?;
        let h = self.transformer.forward(&h, mask)?;
        let h = self.wn.forward(&h, mask, cond)?;
        let stats = self.post.forward(&h)?.broadcast_mul(mask)?;
        Ok((
            stats.narrow(1, 0, self.half)?,
            stats.narrow(1, self.half, self.half)?,
        ))
    }

    fn forward(
        &self,
        x: &Tensor,
        mask: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let x0 = x.narrow(1, 0, self.half)?;
        let x1 = x.narrow(1, self.half, self.half)?;
        let (m, logs) = self.stats(&x0, mask, cond)?;
        let x1 = (m + (x1 * logs.exp()?)?)?.broadcast_mul(mask)?;
        let logdet = logs.sum(D::Minus1)?.sum(D::Minus1)?;
        Ok((Tensor::cat(&[x0, x1], 1)?, logdet))
    }

    fn inverse(&self, x: &Tensor, mask: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let x0 = x.narrow(1, 0, self.half)?;
        let x1 = x.narrow(1, self.half, self.half)?;
        let (m, logs) = self.stats(&x0, mask, cond)?;
        let x1 = ((x1 - m)? * logs.neg()?.exp()?)?.broadcast_mul(mask)?;
        Ok(Tensor::cat(&[x0, x1], 1)?)
    }
}

fn flip(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let idx: Vec<u32> = (0..c as u32).rev().collect();
    let idx = Tensor::from_vec(idx, c, x.device())?;
    Ok(x.index_select(&idx, 1)?)
}

/// Stack of coupling layers, each followed by a channel reversal.
#[derive(Debug, Clone)]
pub struct Flow {
    couplings: Vec<Coupling>,
    channels: usize,
}

impl Flow {
    pub fn new(vs: &Scope, cfg: &FlowConfig, cond_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let couplings = (0..cfg.blocks)
            .map(|i| Coupling::new(&vs.pp(i), cfg, cond_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            couplings,
            channels: cfg.channels,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let c = x.dim(1)?;
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "flow expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok(())
    }

    /// `(B, C, T)` -> transformed tensor and per-item log-determinant `(B,)`.
    pub fn forward(
        &self,
        x: &Tensor,
        mask: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        self.check(x)?;
        let mut x = x.clone();
        let mut logdet: Option<Tensor> = None;
        for c in &self.couplings {
            let (y, ld) = c.forward(&x, mask, cond)?;
            x = flip(&y)?;
            logdet = Some(match logdet {
                Some(acc) => (acc + ld)?,
                None => ld,
            });
        }
        Ok((x, logdet.expect("at least one block")))
    }

    pub fn inverse(&self, x: &Tensor, mask: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.check(x)?;
        let mut x = x.clone();
        for c in self.couplings.iter().rev() {
            x = c.inverse(&flip(&x)?, mask, cond)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn cfg(channels: usize) -> FlowConfig {
        FlowConfig {
            channels,
            blocks: 2,
            hidden: 8,
            kernel: 3,
            wn_layers: 2,
            heads: 2,
            transformer_dim: 16,
        }
    }

    #[test]
    fn identity_at_initialization() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let flow = Flow::new(&store.root(), &cfg(4), 0).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 4, 5), &Device::Cpu).unwrap();
        let mask = Tensor::ones((2, 1, 5), DType::F32, &Device::Cpu).unwrap();
        let (y, ld) = flow.forward(&x, &mask, None).unwrap();
        // Two flips cancel.
        let diff = (y - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(ld.to_vec1::<f32>().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn odd_channels_rejected() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        assert!(matches!(
            Flow::new(&store.root(), &cfg(3), 0),
            Err(Error::Config(_))
        ));
    }
}
