//! Waveform generator and discriminator set shared by the speech feature
//! autoencoder and the text-to-speech model, plus their least-squares and
//! feature-matching losses.
//!
//! Parameter names are stable across both models (`conv_pre`, `ups.{i}`,
//! `resblocks.{i}.{j}`, `conv_post`; discriminators under `mpd.{k}` and
//! `msd.{k}`) so trained weights can be copied between them.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv1d, ConvOpts, Scope, Upsample, LRELU_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub initial_channel: usize,
    pub upsample_factors: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
}

impl GeneratorConfig {
    pub fn paper() -> Self {
        Self {
            initial_channel: 512,
            upsample_factors: vec![8, 8, 4, 4],
            upsample_kernels: vec![16, 16, 8, 8],
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![vec![1, 3, 5]; 3],
        }
    }

    pub fn total_upsampling(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        (self.initial_channel >> (stage + 1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample_factors.is_empty() {
            return Err(Error::Config(
                "generator needs at least one upsampling stage".into(),
            ));
        }
        if self.upsample_factors.len() != self.upsample_kernels.len() {
            return Err(Error::Config(format!(
                "{} upsample factors but {} kernels",
                self.upsample_factors.len(),
                self.upsample_kernels.len()
            )));
        }
        if self
            .upsample_factors
            .iter()
            .zip(&self.upsample_kernels)
            .any(|(&f, &k)| f == 0 || k < f)
        {
            return Err(Error::Config(
                "each upsample kernel must be at least its factor".into(),
            ));
        }
        if self.resblock_kernels.len() != self.resblock_dilations.len()
            || self.resblock_kernels.is_empty()
        {
            return Err(Error::Config(
                "resblock kernels and dilations must pair up".into(),
            ));
        }
        if self.resblock_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("resblock kernels must be odd".into()));
        }
        if self.initial_channel >> self.upsample_factors.len() == 0 {
            return Err(Error::Config(format!(
                "initial_channel {} too small for {} halvings",
                self.initial_channel,
                self.upsample_factors.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    convs1: Vec<Conv1d>,
    convs2: Vec<Conv1d>,
}

impl ResBlock {
    fn new(vs: &Scope, channels: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let mut convs1 = Vec::new();
        let mut convs2 = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            convs1.push(Conv1d::new(
                &vs.pp(format!("convs1.{i}")),
                channels,
                channels,
                kernel,
                ConvOpts::same(kernel, d),
            )?);
            convs2.push(Conv1d::new(
                &vs.pp(format!("convs2.{i}")),
                channels,
                channels,
                kernel,
                ConvOpts::same(kernel, 1),
            )?);
        }
        Ok(Self { convs1, convs2 })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (c1, c2) in self.convs1.iter().zip(&self.convs2) {
            let xt = c1.forward(&leaky_relu(&x, LRELU_SLOPE)?)?;
            let xt = c2.forward(&leaky_relu(&xt, LRELU_SLOPE)?)?;
            x = (x + xt)?;
        }
        Ok(x)
    }
}

/// Upsampling generator: pre-convolution, one transposed-convolution stage
/// per factor each followed by a multi-receptive-field residual fusion, and a
/// tanh output convolution.
#[derive(Debug, Clone)]
pub struct Generator {
    conv_pre: Conv1d,
    ups: Vec<Upsample>,
    resblocks: Vec<Vec<ResBlock>>,
    conv_post: Conv1d,
    cfg: GeneratorConfig,
}

impl Generator {
    pub fn new(vs: &Scope, in_channels: usize, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let conv_pre = Conv1d::new(
            &vs.pp("conv_pre"),
            in_channels,
            cfg.initial_channel,
            7,
            ConvOpts::same(7, 1),
        )?;
        let mut ups = Vec::new();
        let mut resblocks = Vec::new();
        for (i, (&f, &k)) in cfg
            .upsample_factors
            .iter()
            .zip(&cfg.upsample_kernels)
            .enumerate()
        {
            let c_in = if i == 0 {
                cfg.initial_channel
            } else {
                cfg.stage_channels(i - 1)
            };
            let c_out = cfg.stage_channels(i);
            ups.push(Upsample::new(
                &vs.pp(format!("ups.{i}")),
                c_in,
                c_out,
                k,
                f,
            )?);
            let blocks = cfg
                .resblock_kernels
                .iter()
                .zip(&cfg.resblock_dilations)
                .enumerate()
                .map(|(j, (&rk, d))| {
                    ResBlock::new(&vs.pp(format!("resblocks.{i}.{j}")), c_out, rk, d)
                })
                .collect::<Result<Vec<_>>>()?;
            resblocks.push(blocks);
        }
        let last = cfg.stage_channels(cfg.upsample_factors.len() - 1);
        let conv_post = Conv1d::new(
            &vs.pp("conv_post"),
            last,
            1,
            7,
            ConvOpts {
                bias: false,
                ..ConvOpts::same(7, 1)
            },
        )?;
        Ok(Self {
            conv_pre,
            ups,
            resblocks,
            conv_post,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Parameter-name prefixes (relative to the generator scope) of one
    /// upsampling stage together with its residual blocks.
    pub fn stage_prefixes(stage: usize) -> [String; 2] {
        [format!("ups.{stage}."), format!("resblocks.{stage}.")]
    }

    /// `(B, C, T)` latents -> `(B, 1, T * total_upsampling)` waveform.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = self.conv_pre.forward(z)?;
        for (up, blocks) in self.ups.iter().zip(&self.resblocks) {
            x = up.forward(&leaky_relu(&x, LRELU_SLOPE)?)?;
            let mut acc: Option<Tensor> = None;
            for b in blocks {
                let y = b.forward(&x)?;
                acc = Some(match acc {
                    Some(a) => (a + y)?,
                    None => y,
                });
            }
            x = (acc.expect("at least one resblock") / blocks.len() as f64)?;
        }
        let x = leaky_relu(&x, 0.01)?;
        Ok(self.conv_post.forward(&x)?.tanh()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    pub period_channels: Vec<usize>,
    pub scales: usize,
    pub scale_channels: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            period_channels: vec![32, 128, 512, 1024, 1024],
            scales: 3,
            scale_channels: vec![128, 128, 256, 512, 1024, 1024, 1024],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() && self.scales == 0 {
            return Err(Error::Config("discriminator set is empty".into()));
        }
        if self.periods.iter().any(|&p| p == 0) {
            return Err(Error::Config("periods must be positive".into()));
        }
        if (!self.periods.is_empty() && self.period_channels.is_empty())
            || (self.scales > 0 && self.scale_channels.len() < 2)
        {
            return Err(Error::Config(
                "discriminator channel lists too short".into(),
            ));
        }
        Ok(())
    }
}

/// Logits and intermediate feature maps of one sub-discriminator.
#[derive(Debug, Clone)]
pub struct SubOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct PeriodDiscriminator {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDiscriminator {
    fn new(vs: &Scope, period: usize, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i + 1 == channels.len() { 1 } else { 3 };
            convs.push(Conv1d::new(
                &vs.pp(format!("convs.{i}")),
                prev,
                c,
                5,
                ConvOpts {
                    stride,
                    padding: 2,
                    ..ConvOpts::default()
                },
            )?);
            prev = c;
        }
        let post = Conv1d::new(&vs.pp("post"), prev, 1, 3, ConvOpts::same(3, 1))?;
        Ok(Self {
            period,
            convs,
            post,
        })
    }

    fn forward(&self, y: &Tensor) -> Result<SubOutput> {
        let (b, _, n) = y.dims3()?;
        let p = self.period;
        let padded = n.div_ceil(p) * p;
        let y = if padded > n {
            y.pad_with_zeros(2, 0, padded - n)?
        } else {
            y.clone()
        };
        // Columns of the (time / p, p) folding are independent 1-D signals.
        let mut x = y
            .reshape((b, 1, padded / p, p))?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((b * p, 1, padded / p))?;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, LRELU_SLOPE)?;
            features.push(x.clone());
        }
        let x = self.post.forward(&x)?;
        features.push(x.clone());
        Ok(SubOutput {
            logits: x.flatten_all()?,
            features,
        })
    }
}

#[derive(Debug, Clone)]
struct ScaleDiscriminator {
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl ScaleDiscriminator {
    fn new(vs: &Scope, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut prev = 1;
        let last = channels.len() - 1;
        for (i, &c) in channels.iter().enumerate() {
            let (kernel, stride) = match i {
                0 => (15, 1),
                i if i == last => (5, 1),
                _ => (11, 4),
            };
            convs.push(Conv1d::new(
                &vs.pp(format!("convs.{i}")),
                prev,
                c,
                kernel,
                ConvOpts {
                    stride,
                    padding: kernel / 2,
                    ..ConvOpts::default()
                },
            )?);
            prev = c;
        }
        let post = Conv1d::new(&vs.pp("post"), prev, 1, 3, ConvOpts::same(3, 1))?;
        Ok(Self { convs, post })
    }

    fn forward(&self, y: &Tensor) -> Result<SubOutput> {
        let mut x = y.clone();
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, LRELU_SLOPE)?;
            features.push(x.clone());
        }
        let x = self.post.forward(&x)?;
        features.push(x.clone());
        Ok(SubOutput {
            logits: x.flatten_all()?,
            features,
        })
    }
}

fn halve_rate(y: &Tensor) -> Result<Tensor> {
    let (b, c, n) = y.dims3()?;
    let y = if n % 2 == 1 {
        y.pad_with_zeros(2, 0, 1)?
    } else {
        y.clone()
    };
    let m = n.div_ceil(2);
    Ok(y.reshape((b, c, m, 2))?.mean(3)?)
}

/// Multi-period plus multi-scale discriminator set.
#[derive(Debug, Clone)]
pub struct Discriminator {
    periods: Vec<PeriodDiscriminator>,
    scales: Vec<ScaleDiscriminator>,
}

impl Discriminator {
    pub fn new(vs: &Scope, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let periods = cfg
            .periods
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                PeriodDiscriminator::new(&vs.pp(format!("mpd.{i}")), p, &cfg.period_channels)
            })
            .collect::<Result<Vec<_>>>()?;
        let scales = (0..cfg.scales)
            .map(|i| ScaleDiscriminator::new(&vs.pp(format!("msd.{i}")), &cfg.scale_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { periods, scales })
    }

    pub fn n_sub(&self) -> usize {
        self.periods.len() + self.scales.len()
    }

    /// `y`: `(B, 1, N)` waveform.
    pub fn forward(&self, y: &Tensor) -> Result<Vec<SubOutput>> {
        let mut out = Vec::with_capacity(self.n_sub());
        for d in &self.periods {
            out.push(d.forward(y)?);
        }
        let mut y = y.clone();
        for (i, d) in self.scales.iter().enumerate() {
            if i > 0 {
                y = halve_rate(&y)?;
            }
            out.push(d.forward(&y)?);
        }
        Ok(out)
    }
}

/// Least-squares discriminator objective, averaged over sub-discriminators:
/// `mean_k [ mean((D_k(real) - 1)^2) + mean(D_k(fake)^2) ]`.
pub fn discriminator_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Dimension(format!(
            "{} real vs {} fake discriminator outputs",
            real.len(),
            fake.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = (r.affine(1.0, -1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("non-empty") / real.len() as f64)?)
}

/// Least-squares generator objective `mean_k mean((D_k(fake) - 1)^2)`.
pub fn generator_adversarial_loss(fake: &[Tensor]) -> Result<Tensor> {
    if fake.is_empty() {
        return Err(Error::Dimension("no discriminator outputs".into()));
    }
    let mut total: Option<Tensor> = None;
    for f in fake {
        let term = f.affine(1.0, -1.0)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("non-empty") / fake.len() as f64)?)
}

/// `sum_l (1 / N_l) * || real_l - fake_l ||_1` over every feature map of
/// every sub-discriminator.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::Dimension(format!(
            "{} real vs {} fake feature stacks",
            real.len(),
            fake.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (k, (rs, fs)) in real.iter().zip(fake).enumerate() {
        if rs.len() != fs.len() {
            return Err(Error::Dimension(format!(
                "sub-discriminator {k}: {} real vs {} fake layers",
                rs.len(),
                fs.len()
            )));
        }
        for (l, (r, f)) in rs.iter().zip(fs).enumerate() {
            if r.dims() != f.dims() {
                return Err(Error::Dimension(format!(
                    "sub-discriminator {k} layer {l}: {:?} vs {:?}",
                    r.dims(),
                    f.dims()
                )));
            }
            let term = (r - f)?.abs()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::Dimension("no feature maps".into()))
}

pub fn logits(outputs: &[SubOutput]) -> Vec<Tensor> {
    outputs.iter().map(|o| o.logits.clone()).collect()
}

pub fn features(outputs: &[SubOutput]) -> Vec<Vec<Tensor>> {
    outputs.iter().map(|o| o.features.clone()).collect()
}
