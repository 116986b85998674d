//! Building blocks shared by the encoder, vocoder, flows and text models.
//! Sequence tensors are `(batch, channels, time)` unless a function says
//! otherwise; attention blocks work on `(batch, length, width)`.

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, D};

use super::params::{Init, Scope};
use crate::error::Result;

pub const LRELU_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// `0.5 * (tanh(x / 2) + 1)`, finite with finite gradients for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `(B, 1, T)` mask with ones on the first `lengths[b]` steps.
pub fn sequence_mask(
    lengths: &[usize],
    max_len: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = vec![0f32; lengths.len() * max_len];
    for (b, &l) in lengths.iter().enumerate() {
        for t in 0..l.min(max_len) {
            data[b * max_len + t] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (lengths.len(), 1, max_len), device)?.to_dtype(dtype)?)
}

/// Sinusoidal position table `(len, width)`.
pub fn positional_encoding(
    len: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = vec![0f32; len * width];
    for pos in 0..len {
        for i in 0..width {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * rate;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Ok(Tensor::from_vec(data, (len, width), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    pub init: Init,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
            init: Init::FanIn,
        }
    }
}

impl ConvOpts {
    /// Length-preserving padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::default()
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }
}

/// `x`: `(B, C_in, L)`, `w`: `(C_out, C_in, K)` -> `(B, C_out, L_out)`.
/// The forward pass is candle's; gradients are computed here with
/// contiguous, unbatched-kernel convolutions.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
) -> Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    let y = x
        .detach()
        .conv1d(&w.detach(), padding, stride, dilation, 1)?;
    if !x.track_op() && !w.track_op() {
        return Ok(y);
    }
    let (b, c_out, l_out) = y.dims3()?;
    let op = ConvGrad {
        need_x: x.track_op(),
        need_w: w.track_op(),
        padding,
        stride,
        dilation,
        shape: (b, c_out, l_out),
    };
    Ok((y + x.apply_op2(&w, op)?)?)
}

/// Zero-valued node that carries the convolution gradients.
struct ConvGrad {
    need_x: bool,
    need_w: bool,
    padding: usize,
    stride: usize,
    dilation: usize,
    shape: (usize, usize, usize),
}

impl CustomOp2 for ConvGrad {
    fn name(&self) -> &'static str {
        "conv1d-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        _: &Layout,
        _: &CpuStorage,
        _: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.shape.0 * self.shape.1 * self.shape.2;
        let zeros = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(vec![0.0; n]),
            CpuStorage::F64(_) => CpuStorage::F64(vec![0.0; n]),
            _ => candle_core::bail!("conv1d: only f32 and f64 are supported"),
        };
        Ok((zeros, Shape::from(self.shape)))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (p, s, d) = (self.padding, self.stride, self.dilation);
        let (b, c_out, _) = self.shape;
        let (_, c_in, l_in) = x.dims3()?;
        let k = w.dim(2)?;
        let lp = l_in + 2 * p;
        let g = g.contiguous()?;

        let gx = if !self.need_x {
            None
        } else {
            // candle's transposed convolution is only reliable one item at a time.
            let parts = (0..b)
                .map(|i| {
                    let full = g.narrow(0, i, 1)?.conv_transpose1d(w, 0, 0, s, d, 1)?;
                    full.pad_with_zeros(2, 0, lp - full.dim(2)?)
                })
                .collect::<candle_core::Result<Vec<_>>>()?;
            let full = Tensor::cat(&parts, 0)?;
            Some(full.narrow(2, p, l_in)?)
        };
        if !self.need_w {
            return Ok((gx, None));
        }
        let xp = x.pad_with_zeros(2, p, p)?.transpose(0, 1)?.contiguous()?;
        let gk = g.transpose(0, 1)?.contiguous()?;
        let gw = xp
            .conv1d(&gk, 0, d, s, 1)?
            .narrow(2, 0, k)?
            .transpose(0, 1)?
            .contiguous()?;
        debug_assert_eq!(gw.dims(), &[c_out, c_in, k]);
        Ok((gx, Some(gw)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    opts: ConvOpts,
}

impl Conv1d {
    pub fn new(
        vs: &Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        opts: ConvOpts,
    ) -> Result<Self> {
        let weight = vs.get(&[c_out, c_in, kernel], "weight", opts.init)?;
        let bias = if opts.bias {
            Some(vs.get(&[c_out], "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, opts })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ConvOpts {
            padding,
            stride,
            dilation,
            ..
        } = self.opts;
        let y = conv1d(x, &self.weight, padding, stride, dilation)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed-convolution style upsampler: zero insertion by `factor`
/// followed by a `kernel`-tap convolution. Output length is exactly
/// `factor * input_length`.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv1d,
    factor: usize,
    left: usize,
    right: usize,
}

impl Upsample {
    pub fn new(
        vs: &Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        factor: usize,
    ) -> Result<Self> {
        let conv = Conv1d::new(vs, c_in, c_out, kernel, ConvOpts::default())?;
        let pad = kernel.saturating_sub(factor) / 2;
        let left = kernel - 1 - pad.min(kernel - 1);
        let right = kernel - 1 - left;
        Ok(Self {
            conv,
            factor,
            left,
            right,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t) = x.dims3()?;
        let stuffed = if self.factor == 1 {
            x.clone()
        } else {
            let zeros = Tensor::zeros((b, c, t, self.factor - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?.reshape((b, c, t * self.factor))?
        };
        let padded = stuffed.pad_with_zeros(2, self.left, self.right)?;
        self.conv.forward(&padded)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(vs: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Self::with_init(vs, c_in, c_out, Init::FanIn)
    }

    pub fn with_init(vs: &Scope, c_in: usize, c_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: vs.get(&[c_out, c_in], "weight", init)?,
            bias: vs.get(&[c_out], "bias", Init::Zeros)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

/// Lookup table `(vocab, width)`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub weight: Tensor,
}

impl Embedding {
    pub fn new(vs: &Scope, vocab: usize, width: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.get(
                &[vocab, width],
                "weight",
                Init::Normal((width as f64).powf(-0.5)),
            )?,
        })
    }

    /// `ids`: `(B, L)` u32 -> `(B, L, width)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let width = self.weight.dim(1)?;
        Ok(self
            .weight
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, width))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &Scope, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: vs.get(&[width], "gamma", Init::Const(1.0))?,
            beta: vs.get(&[width], "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    /// Normalizes the channel axis of a `(B, C, T)` tensor.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?)
    }
}

/// Multi-head scaled dot-product attention on `(B, L, width)` inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
    width: usize,
}

pub struct AttentionOutput {
    /// Per-head weighted sums of value vectors, concatenated, before the
    /// output projection: `(B, Lq, width)`.
    pub combined: Tensor,
    /// Attention probabilities `(B, heads, Lq, Lk)`.
    pub probs: Tensor,
}

impl MultiHeadAttention {
    pub fn new(vs: &Scope, width: usize, heads: usize) -> Result<Self> {
        Self::with_output_init(vs, width, heads, Init::FanIn)
    }

    pub fn with_output_init(
        vs: &Scope,
        width: usize,
        heads: usize,
        out_init: Init,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::error::Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&vs.pp("q"), width, width)?,
            k: Linear::new(&vs.pp("k"), width, width)?,
            v: Linear::new(&vs.pp("v"), width, width)?,
            o: Linear::with_init(&vs.pp("o"), width, width, out_init)?,
            heads,
            width,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.width / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention logits `(B, heads, Lq, Lk)`; `mask` is a 0/1 tensor
    /// broadcastable to that shape.
    pub fn scores(&self, query: &Tensor, keys: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(keys)?)?;
        let scale = 1.0 / ((self.width / self.heads) as f64).sqrt();
        let s = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .affine(scale, 0.0)?;
        match mask {
            Some(m) => {
                let m = m.to_dtype(s.dtype())?;
                let penalty = m.affine(1e4, -1e4)?;
                Ok(s.broadcast_mul(&m)?.broadcast_add(&penalty)?)
            }
            None => Ok(s),
        }
    }

    pub fn attend(
        &self,
        query: &Tensor,
        kv: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<AttentionOutput> {
        let probs = softmax_last(&self.scores(query, kv, mask)?)?;
        let v = self.split(&self.v.forward(kv)?)?;
        let (b, _, lq, _) = probs.dims4()?;
        let combined = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, self.width))?;
        Ok(AttentionOutput { combined, probs })
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.o.forward(&self.attend(query, kv, mask)?.combined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(vs: &Scope, width: usize, hidden: usize) -> Result<Self> {
        Self::with_output_init(vs, width, hidden, Init::FanIn)
    }

    pub fn with_output_init(
        vs: &Scope,
        width: usize,
        hidden: usize,
        out_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&vs.pp("l1"), width, hidden)?,
            l2: Linear::with_init(&vs.pp("l2"), hidden, width, out_init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(vs: &Scope, width: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&vs.pp("attn"), width, heads)?,
            norm1: LayerNorm::new(&vs.pp("norm1"), width)?,
            ffn: FeedForward::new(&vs.pp("ffn"), width, ffn_hidden)?,
            norm2: LayerNorm::new(&vs.pp("norm2"), width)?,
        })
    }

    /// `x`: `(B, L, width)`; `attn_mask` broadcastable to `(B, heads, L, L)`;
    /// `row_mask`: `(B, L, 1)`.
    pub fn forward(
        &self,
        x: &Tensor,
        attn_mask: Option<&Tensor>,
        row_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let a = self.attn.forward(x, x, attn_mask)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let f = self.ffn.forward(&x)?;
        let x = self.norm2.forward(&(x + f)?)?;
        match row_mask {
            Some(m) => Ok(x.broadcast_mul(m)?),
            None => Ok(x),
        }
    }
}

/// Gated dilated convolution stack with skip connections.
#[derive(Debug, Clone)]
pub struct WaveNet {
    in_layers: Vec<Conv1d>,
    res_skip: Vec<Conv1d>,
    cond: Option<Conv1d>,
    hidden: usize,
}

impl WaveNet {
    pub fn new(
        vs: &Scope,
        hidden: usize,
        kernel: usize,
        dilation_rate: usize,
        n_layers: usize,
        cond_channels: usize,
    ) -> Result<Self> {
        let mut in_layers = Vec::with_capacity(n_layers);
        let mut res_skip = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let dilation = dilation_rate.pow(i as u32);
            in_layers.push(Conv1d::new(
                &vs.pp(format!("in_layers.{i}")),
                hidden,
                2 * hidden,
                kernel,
                ConvOpts::same(kernel, dilation),
            )?);
            let out = if i + 1 < n_layers { 2 * hidden } else { hidden };
            res_skip.push(Conv1d::new(
                &vs.pp(format!("res_skip.{i}")),
                hidden,
                out,
                1,
                ConvOpts::default(),
            )?);
        }
        let cond = if cond_channels > 0 {
            Some(Conv1d::new(
                &vs.pp("cond"),
                cond_channels,
                2 * hidden * n_layers,
                1,
                ConvOpts::default(),
            )?)
        } else {
            None
        };
        Ok(Self {
            in_layers,
            res_skip,
            cond,
            hidden,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.in_layers.len()
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let h = self.hidden;
        let n = self.in_layers.len();
        let g = match (&self.cond, cond) {
            (Some(layer), Some(c)) => Some(layer.forward(c)?),
            _ => None,
        };
        let mut x = x.clone();
        let mut output: Option<Tensor> = None;
        for i in 0..n {
            let mut x_in = self.in_layers[i].forward(&x)?;
            if let Some(g) = &g {
                x_in = x_in.broadcast_add(&g.narrow(1, 2 * h * i, 2 * h)?)?;
            }
            let acts = (x_in.narrow(1, 0, h)?.tanh()? * sigmoid(&x_in.narrow(1, h, h)?)?)?;
            let rs = self.res_skip[i].forward(&acts)?;
            let skip = if i + 1 < n {
                x = (x + rs.narrow(1, 0, h)?)?.broadcast_mul(mask)?;
                rs.narrow(1, h, h)?
            } else {
                rs
            };
            output = Some(match output {
                Some(o) => (o + skip)?,
                None => skip,
            });
        }
        let out = output.unwrap_or_else(|| x.zeros_like().expect("zeros"));
        Ok(out.broadcast_mul(mask)?)
    }
}
