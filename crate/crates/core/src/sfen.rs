//! Speech feature encoding network: a variational encoder from mel frames to
//! per-frame diagonal Gaussians, the upsampling waveform decoder, the
//! discriminator set and the combined objective.
//!
//! Parameter names: `enc.pre`, `enc.wn.*`, `enc.proj`, `dec.*` (see
//! [`crate::vocoder::Generator`]) and `disc.*`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram, sample_segment_with_mel, MelConfig, MelSpectrogram, Waveform};
use crate::checkpoint::{Checkpoint, ModelKind, OPTIM_PREFIX};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::nn::{
    array_from_tensor, scalar, tensor_from_array, AdamW, Conv1d, ConvOpts, MelTransform,
    ParamStore, WaveNet,
};
use crate::training::{checkpoint_path, step_rng, LossLog, LossRecord, TrainConfig};
use crate::vocoder::{
    discriminator_loss, feature_matching_loss, features, generator_adversarial_loss, logits,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};

/// Smallest scale the encoder can emit.
pub const MIN_SIGMA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfenConfig {
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub lambda_sf: f64,
    pub segment_samples: usize,
}

impl SfenConfig {
    pub fn paper() -> Self {
        Self {
            latent_dim: 2048,
            encoder_hidden: 512,
            encoder_layers: 8,
            encoder_kernel: 5,
            generator: GeneratorConfig::paper(),
            discriminator: DiscriminatorConfig::paper(),
            lambda_sf: 45.0,
            segment_samples: 8192,
        }
    }

    /// Desk-scale settings for hop 256: latent width 64, four 4x stages.
    pub fn toy() -> Self {
        Self {
            latent_dim: 64,
            encoder_hidden: 64,
            encoder_layers: 4,
            encoder_kernel: 5,
            generator: GeneratorConfig {
                initial_channel: 64,
                upsample_factors: vec![4, 4, 4, 4],
                upsample_kernels: vec![8, 8, 8, 8],
                resblock_kernels: vec![3, 5],
                resblock_dilations: vec![vec![1, 3], vec![1, 3]],
            },
            discriminator: DiscriminatorConfig {
                periods: vec![2, 3, 5],
                period_channels: vec![8, 16, 16],
                scales: 2,
                scale_channels: vec![8, 16, 16],
            },
            lambda_sf: 45.0,
            segment_samples: 8192,
        }
    }

    pub fn hop_size(&self) -> usize {
        self.generator.total_upsampling()
    }

    pub fn validate(&self, mel: &MelConfig) -> Result<()> {
        mel.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.latent_dim == 0 || self.encoder_hidden == 0 || self.encoder_layers == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.encoder_kernel % 2 == 0 {
            return Err(Error::Config("encoder_kernel must be odd".into()));
        }
        if self.hop_size() != mel.hop_size {
            return Err(Error::Config(format!(
                "upsample factors multiply to {}, mel hop_size is {}",
                self.hop_size(),
                mel.hop_size
            )));
        }
        if !(self.lambda_sf > 0.0) {
            return Err(Error::Config("lambda_sf must be positive".into()));
        }
        if self.segment_samples == 0 || self.segment_samples % mel.hop_size != 0 {
            return Err(Error::Config(format!(
                "segment_samples {} is not a positive multiple of hop {}",
                self.segment_samples, mel.hop_size
            )));
        }
        if self.segment_samples < mel.window_size {
            return Err(Error::Config(
                "segment_samples shorter than the analysis window".into(),
            ));
        }
        Ok(())
    }
}

/// Per-frame diagonal Gaussian `q(z | s)`; both matrices are `T x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrameDistribution {
    pub mu: Array2<f32>,
    pub sigma: Array2<f32>,
}

impl LatentFrameDistribution {
    pub fn new(mu: Array2<f32>, sigma: Array2<f32>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::Dimension(format!(
                "mu {:?} vs sigma {:?}",
                mu.dim(),
                sigma.dim()
            )));
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite latent parameters".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn n_frames(&self) -> usize {
        self.mu.nrows()
    }
}

/// `z = mu + sigma * noise`.
pub fn reparameterize(dist: &LatentFrameDistribution, noise: &Array2<f32>) -> Result<Array2<f32>> {
    if noise.dim() != dist.mu.dim() {
        return Err(Error::Dimension(format!(
            "noise {:?} vs latent {:?}",
            noise.dim(),
            dist.mu.dim()
        )));
    }
    Ok(&dist.mu + &(&dist.sigma * noise))
}

pub fn reparameterize_tensor(mu: &Tensor, sigma: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.dims() != noise.dims() || sigma.dims() != noise.dims() {
        return Err(Error::Dimension(format!(
            "mu {:?}, sigma {:?}, noise {:?}",
            mu.dims(),
            sigma.dims(),
            noise.dims()
        )));
    }
    Ok((mu + (sigma * noise)?)?)
}

/// `mean(0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2))` over all elements.
pub fn kl_unit_gaussian(dist: &LatentFrameDistribution) -> Result<f64> {
    if dist.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("sigma must be strictly positive".into()));
    }
    let n = dist.mu.len();
    if n == 0 {
        return Err(Error::Dimension("empty distribution".into()));
    }
    let sum: f64 = dist
        .mu
        .iter()
        .zip(dist.sigma.iter())
        .map(|(&m, &s)| {
            let (m, s) = (m as f64, s as f64);
            0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln())
        })
        .sum();
    Ok(sum / n as f64)
}

pub fn kl_unit_gaussian_tensor(mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let t = ((mu.sqr()? + sigma.sqr()?)?.affine(1.0, -1.0)? - (sigma.log()? * 2.0)?)?;
    Ok((t.mean_all()? * 0.5)?)
}

/// Mean absolute difference between `s` and the mel of `y_hat`.
pub fn reconstruction_loss(s: &MelSpectrogram, y_hat: &Waveform) -> Result<f64> {
    let s_hat = mel_spectrogram(y_hat, &s.config)?;
    mel_l1(s, &s_hat)
}

pub fn mel_l1(s: &MelSpectrogram, s_hat: &MelSpectrogram) -> Result<f64> {
    if s.frames.dim() != s_hat.frames.dim() {
        return Err(Error::Dimension(format!(
            "mel {:?} vs reconstruction {:?}",
            s.frames.dim(),
            s_hat.frames.dim()
        )));
    }
    let sum: f64 = s
        .frames
        .iter()
        .zip(s_hat.frames.iter())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(sum / s.frames.len() as f64)
}

pub fn mel_l1_tensor(s: &Tensor, s_hat: &Tensor) -> Result<Tensor> {
    if s.dims() != s_hat.dims() {
        return Err(Error::Dimension(format!(
            "mel {:?} vs reconstruction {:?}",
            s.dims(),
            s_hat.dims()
        )));
    }
    Ok((s - s_hat)?.abs()?.mean_all()?)
}

/// Individual terms of the generator objective.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub adv: Tensor,
    pub fm: Tensor,
    pub recon: Tensor,
    pub kl: Tensor,
}

impl GeneratorLoss {
    pub fn record(&self, step: u64) -> Result<LossRecord> {
        let mut r = LossRecord::new(step);
        r.push("gen_total", scalar(&self.total)?);
        r.push("adv", scalar(&self.adv)?);
        r.push("fm", scalar(&self.fm)?);
        r.push("recon", scalar(&self.recon)?);
        r.push("kl", scalar(&self.kl)?);
        Ok(r)
    }
}

/// `adv + fm + lambda_sf * recon + kl`.
pub fn sfen_generator_loss(
    d_fake: &[Tensor],
    feat_real: &[Vec<Tensor>],
    feat_fake: &[Vec<Tensor>],
    s: &Tensor,
    s_hat: &Tensor,
    kl: &Tensor,
    lambda_sf: f64,
) -> Result<GeneratorLoss> {
    let adv = generator_adversarial_loss(d_fake)?;
    let fm = feature_matching_loss(feat_real, feat_fake)?;
    let recon = mel_l1_tensor(s, s_hat)?;
    let total = ((&adv + &fm)? + (&recon * lambda_sf)?)?;
    let total = (total + kl)?;
    Ok(GeneratorLoss {
        total,
        adv,
        fm,
        recon,
        kl: kl.clone(),
    })
}

pub fn sfen_discriminator_loss(d_real: &[Tensor], d_fake: &[Tensor]) -> Result<Tensor> {
    discriminator_loss(d_real, d_fake)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SfenSnapshot {
    pub mel: MelConfig,
    pub sfen: SfenConfig,
}

#[derive(Debug, Clone)]
pub struct SfenEncoder {
    pre: Conv1d,
    wn: WaveNet,
    proj: Conv1d,
    latent_dim: usize,
}

impl SfenEncoder {
    fn new(vs: &crate::nn::Scope, n_mels: usize, cfg: &SfenConfig) -> Result<Self> {
        Ok(Self {
            pre: Conv1d::new(
                &vs.pp("pre"),
                n_mels,
                cfg.encoder_hidden,
                1,
                ConvOpts::default(),
            )?,
            wn: WaveNet::new(
                &vs.pp("wn"),
                cfg.encoder_hidden,
                cfg.encoder_kernel,
                1,
                cfg.encoder_layers,
                0,
            )?,
            proj: Conv1d::new(
                &vs.pp("proj"),
                cfg.encoder_hidden,
                2 * cfg.latent_dim,
                1,
                ConvOpts::default(),
            )?,
            latent_dim: cfg.latent_dim,
        })
    }

    /// `(B, n_mels, T)` -> `(mu, sigma)`, each `(B, H, T)`.
    pub fn forward(&self, mel: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = self.pre.forward(mel)?.broadcast_mul(mask)?;
        let x = self.wn.forward(&x, mask, None)?;
        let stats = self.proj.forward(&x)?.broadcast_mul(mask)?;
        let mu = stats.narrow(1, 0, self.latent_dim)?;
        let log_sigma = stats.narrow(1, self.latent_dim, self.latent_dim)?;
        let floor = Tensor::full(MIN_SIGMA.ln(), log_sigma.shape(), log_sigma.device())?
            .to_dtype(log_sigma.dtype())?;
        let log_sigma = log_sigma.maximum(&floor)?;
        let sigma = log_sigma.exp()?;
        Ok((mu, sigma))
    }
}

/// Encoder, decoder and discriminator with their parameter store.
#[derive(Debug, Clone)]
pub struct Sfen {
    pub cfg: SfenConfig,
    pub mel_cfg: MelConfig,
    pub store: ParamStore,
    pub encoder: SfenEncoder,
    pub decoder: Generator,
    pub discriminator: Discriminator,
    mel_transform: MelTransform,
}

impl Sfen {
    pub fn new(
        cfg: &SfenConfig,
        mel_cfg: &MelConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate(mel_cfg)?;
        let store = ParamStore::new(seed, dtype, device);
        let root = store.root();
        let encoder = SfenEncoder::new(&root.pp("enc"), mel_cfg.n_mels, cfg)?;
        let decoder = Generator::new(&root.pp("dec"), cfg.latent_dim, &cfg.generator)?;
        let discriminator = Discriminator::new(&root.pp("disc"), &cfg.discriminator)?;
        let mel_transform = MelTransform::new(mel_cfg, dtype, device)?;
        Ok(Self {
            cfg: cfg.clone(),
            mel_cfg: mel_cfg.clone(),
            store,
            encoder,
            decoder,
            discriminator,
            mel_transform,
        })
    }

    pub fn snapshot(&self) -> SfenSnapshot {
        SfenSnapshot {
            mel: self.mel_cfg.clone(),
            sfen: self.cfg.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn mel_transform(&self) -> &MelTransform {
        &self.mel_transform
    }

    /// Rebuild a model from a checkpoint's config snapshot and parameters.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        ck.expect_kind(ModelKind::Sfen)?;
        let snap: SfenSnapshot =
            toml::from_str(&ck.config).map_err(|e| Error::Format(e.to_string()))?;
        let model = Self::new(&snap.sfen, &snap.mel, 0, dtype, device)?;
        model.store.import(&ck.parameters())?;
        Ok(model)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Self::from_checkpoint(
            &Checkpoint::load_kind(path, ModelKind::Sfen)?,
            DType::F32,
            device,
        )
    }

    fn mel_tensor(&self, mel: &MelSpectrogram) -> Result<Tensor> {
        if mel.n_mels() != self.mel_cfg.n_mels {
            return Err(Error::Dimension(format!(
                "mel has {} bins, encoder expects {}",
                mel.n_mels(),
                self.mel_cfg.n_mels
            )));
        }
        Ok(tensor_from_array(&mel.frames, self.dtype(), self.device())?
            .t()?
            .unsqueeze(0)?)
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<LatentFrameDistribution> {
        let x = self.mel_tensor(mel)?;
        let mask = Tensor::ones((1, 1, mel.n_frames()), self.dtype(), self.device())?;
        let (mu, sigma) = self.encoder.forward(&x, &mask)?;
        LatentFrameDistribution::new(
            array_from_tensor(&mu.squeeze(0)?.t()?)?,
            array_from_tensor(&sigma.squeeze(0)?.t()?)?,
        )
    }

    /// `T x H` latents -> `T * hop` samples.
    pub fn decode(&self, z: &Array2<f32>) -> Result<Waveform> {
        if z.ncols() != self.cfg.latent_dim {
            return Err(Error::Dimension(format!(
                "latent width {}, decoder expects {}",
                z.ncols(),
                self.cfg.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite latents".into()));
        }
        let zt = tensor_from_array(z, self.dtype(), self.device())?
            .t()?
            .unsqueeze(0)?;
        let y = self.decoder.forward(&zt)?.flatten_all()?;
        let samples = y.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Waveform::new(samples, self.mel_cfg.sample_rate)
    }

    /// Full generator objective on one batch with fixed noise; no parameter
    /// update. `mel`: `(B, n_mels, T)`, `wave`: `(B, T * hop)`, `noise`:
    /// `(B, H, T)`.
    pub fn generator_objective(
        &self,
        mel: &Tensor,
        wave: &Tensor,
        noise: &Tensor,
    ) -> Result<GeneratorLoss> {
        let (b, _, t) = mel.dims3()?;
        let mask = Tensor::ones((b, 1, t), self.dtype(), self.device())?;
        let (mu, sigma) = self.encoder.forward(mel, &mask)?;
        let z = reparameterize_tensor(&mu, &sigma, noise)?;
        let y_hat = self.decoder.forward(&z)?;
        let y = wave.unsqueeze(1)?;
        let real = self.discriminator.forward(&y)?;
        let fake = self.discriminator.forward(&y_hat)?;
        let feat_real: Vec<Vec<Tensor>> = features(&real)
            .into_iter()
            .map(|fs| fs.into_iter().map(|f| f.detach()).collect())
            .collect();
        let s = self.mel_transform.forward(wave)?;
        let s_hat = self.mel_transform.forward(&y_hat.squeeze(1)?)?;
        let kl = kl_unit_gaussian_tensor(&mu, &sigma)?;
        sfen_generator_loss(
            &logits(&fake),
            &feat_real,
            &features(&fake),
            &s,
            &s_hat,
            &kl,
            self.cfg.lambda_sf,
        )
    }
}

/// One training batch: encoder input mels, target waveforms and noise.
#[derive(Debug, Clone)]
pub struct SfenBatch {
    pub mel: Tensor,
    pub wave: Tensor,
    pub noise: Tensor,
}

/// Draw `batch_size` random segments (clip chosen uniformly, offset via
/// [`sample_segment_with_mel`]) plus reparameterization noise.
pub fn sample_batch<R: Rng + ?Sized>(
    clips: &[Clip],
    cfg: &SfenConfig,
    batch_size: usize,
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<SfenBatch> {
    if clips.is_empty() {
        return Err(Error::Input("no training clips".into()));
    }
    let seg = cfg.segment_samples;
    let mut mels = Vec::with_capacity(batch_size);
    let mut waves = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let clip = &clips[rng.random_range(0..clips.len())];
        let (w, m) = sample_segment_with_mel(&clip.wave, &clip.mel, seg, rng)?;
        mels.push(tensor_from_array(&m.frames, dtype, device)?.t()?);
        waves.push(Tensor::from_vec(w.samples, seg, device)?.to_dtype(dtype)?);
    }
    let frames = seg / clips[0].mel.config.hop_size;
    let noise: Vec<f32> = (0..batch_size * cfg.latent_dim * frames)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Ok(SfenBatch {
        mel: Tensor::stack(&mels, 0)?,
        wave: Tensor::stack(&waves, 0)?,
        noise: Tensor::from_vec(noise, (batch_size, cfg.latent_dim, frames), device)?
            .to_dtype(dtype)?,
    })
}

const GEN_GROUP: &str = "optim.gen";
const DISC_GROUP: &str = "optim.disc";

/// Alternating discriminator / generator optimization of an [`Sfen`].
pub struct SfenTrainer {
    pub model: Sfen,
    pub train: TrainConfig,
    opt_gen: AdamW,
    opt_disc: AdamW,
    step: u64,
    steps_per_epoch: u64,
}

impl SfenTrainer {
    pub fn new(model: Sfen, train: &TrainConfig, n_clips: usize) -> Result<Self> {
        train.validate()?;
        let mut gen_params = model.store.vars_with_prefix("enc.");
        gen_params.extend(model.store.vars_with_prefix("dec."));
        let opt_gen = AdamW::new(gen_params, train.optimizer.clone())?;
        let opt_disc = AdamW::new(
            model.store.vars_with_prefix("disc."),
            train.optimizer.clone(),
        )?;
        Ok(Self {
            model,
            train: train.clone(),
            opt_gen,
            opt_disc,
            step: 0,
            steps_per_epoch: train.steps_per_epoch(n_clips),
        })
    }

    /// Restore parameters, optimizer moments and the step counter.
    pub fn resume(
        ck: &Checkpoint,
        train: &TrainConfig,
        n_clips: usize,
        device: &Device,
    ) -> Result<Self> {
        let model = Sfen::from_checkpoint(ck, DType::F32, device)?;
        let mut t = Self::new(model, train, n_clips)?;
        let state = ck.optimizer_state();
        t.opt_gen.import_state(GEN_GROUP, &state, ck.step)?;
        t.opt_disc.import_state(DISC_GROUP, &state, ck.step)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt_gen.learning_rate()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, clips: &[Clip]) -> Result<LossRecord> {
        let step = self.step + 1;
        let mut rng = step_rng(self.train.seed, step);
        let epoch = self.step / self.steps_per_epoch;
        self.opt_gen.set_epoch(epoch);
        self.opt_disc.set_epoch(epoch);
        let m = &self.model;
        let batch = sample_batch(
            clips,
            &m.cfg,
            self.train.batch_size,
            m.dtype(),
            m.device(),
            &mut rng,
        )?;

        let (b, _, t) = batch.mel.dims3()?;
        let mask = Tensor::ones((b, 1, t), m.dtype(), m.device())?;
        let (mu, sigma) = m.encoder.forward(&batch.mel, &mask)?;
        let z = reparameterize_tensor(&mu, &sigma, &batch.noise)?;
        let y_hat = m.decoder.forward(&z)?;
        let y = batch.wave.unsqueeze(1)?;

        let real = m.discriminator.forward(&y)?;
        let fake = m.discriminator.forward(&y_hat.detach())?;
        let loss_d = sfen_discriminator_loss(&logits(&real), &logits(&fake))?;
        let mut rec = LossRecord::new(step);
        rec.push("disc", scalar(&loss_d)?);
        rec.check_finite()?;
        self.opt_disc.step(&loss_d.backward()?)?;

        let m = &self.model;
        let real = m.discriminator.forward(&y)?;
        let fake = m.discriminator.forward(&y_hat)?;
        let feat_real: Vec<Vec<Tensor>> = features(&real)
            .into_iter()
            .map(|fs| fs.into_iter().map(|f| f.detach()).collect())
            .collect();
        let s = m.mel_transform.forward(&batch.wave)?;
        let s_hat = m.mel_transform.forward(&y_hat.squeeze(1)?)?;
        let kl = kl_unit_gaussian_tensor(&mu, &sigma)?;
        let loss = sfen_generator_loss(
            &logits(&fake),
            &feat_real,
            &features(&fake),
            &s,
            &s_hat,
            &kl,
            m.cfg.lambda_sf,
        )?;
        let gen_rec = loss.record(step)?;
        rec.terms.extend(gen_rec.terms);
        rec.check_finite()?;
        self.opt_gen.step(&loss.total.backward()?)?;
        self.step = step;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.model.store.export()?;
        tensors.extend(self.opt_gen.export_state(GEN_GROUP)?);
        tensors.extend(self.opt_disc.export_state(DISC_GROUP)?);
        debug_assert!(
            tensors
                .iter()
                .filter(|t| t.name.starts_with(OPTIM_PREFIX))
                .count()
                > 0
        );
        let config =
            toml::to_string(&self.model.snapshot()).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint {
            kind: ModelKind::Sfen,
            step: self.step,
            config,
            tensors,
        })
    }

    /// Train until `max_steps`, logging every step and checkpointing every
    /// `checkpoint_interval` steps and at the end.
    pub fn run(&mut self, clips: &[Clip], ckpt_dir: &Path, log: &mut LossLog) -> Result<()> {
        check_clips(clips, &self.model.cfg)?;
        while self.step < self.train.max_steps {
            let rec = self.train_step(clips)?;
            log.write(&rec)?;
            if self.step % self.train.checkpoint_interval == 0 || self.step == self.train.max_steps
            {
                log.flush()?;
                self.checkpoint()?
                    .save(&checkpoint_path(ckpt_dir, ModelKind::Sfen, self.step))?;
            }
        }
        log.flush()
    }
}

/// Every clip must hold at least one training segment.
pub fn check_clips(clips: &[Clip], cfg: &SfenConfig) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.wave.len() < cfg.segment_samples) {
        return Err(Error::Length(format!(
            "clip `{}` has {} samples, shorter than segment_samples {}",
            c.id,
            c.wave.len(),
            cfg.segment_samples
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn micro() -> (SfenConfig, MelConfig) {
        let mel = MelConfig {
            fft_size: 64,
            window_size: 64,
            hop_size: 16,
            n_mels: 8,
            ..MelConfig::default()
        };
        let cfg = SfenConfig {
            latent_dim: 4,
            encoder_hidden: 8,
            encoder_layers: 2,
            encoder_kernel: 3,
            generator: GeneratorConfig {
                initial_channel: 8,
                upsample_factors: vec![4, 4],
                upsample_kernels: vec![8, 8],
                resblock_kernels: vec![3],
                resblock_dilations: vec![vec![1]],
            },
            discriminator: DiscriminatorConfig {
                periods: vec![2],
                period_channels: vec![4, 4],
                scales: 1,
                scale_channels: vec![4, 4],
            },
            lambda_sf: 45.0,
            segment_samples: 64,
        };
        (cfg, mel)
    }

    #[test]
    fn paper_projection_width() {
        let cfg = SfenConfig::paper();
        assert_eq!(2 * cfg.latent_dim, 4096);
        assert_eq!(cfg.hop_size(), 1024);
        assert!(cfg.validate(&MelConfig::default()).is_ok());
    }

    #[test]
    fn hop_mismatch_rejected() {
        let (cfg, mut mel) = micro();
        mel.hop_size = 8;
        assert!(matches!(cfg.validate(&mel), Err(Error::Config(_))));
    }

    #[test]
    fn encode_decode_shapes() {
        let (cfg, mel_cfg) = micro();
        let m = Sfen::new(&cfg, &mel_cfg, 1, DType::F32, &Device::Cpu).unwrap();
        let mel = MelSpectrogram {
            frames: Array2::from_shape_fn((8, 8), |(i, j)| (i + j) as f32 * 0.1 - 3.0),
            config: mel_cfg.clone(),
        };
        let d = m.encode(&mel).unwrap();
        assert_eq!(d.mu.dim(), (8, 4));
        assert!(d.sigma.iter().all(|&s| s >= MIN_SIGMA as f32));
        assert_eq!(m.decode(&d.mu).unwrap().len(), 8 * 16);
        assert_eq!(m.decode(&Array2::zeros((1, 4))).unwrap().len(), 16);
    }

    #[test]
    fn reparameterize_cases() {
        let mu = array![[1.0f32, -2.0], [0.5, 3.0]];
        let sigma = array![[0.5f32, 2.0], [1.0, 1.0]];
        let d = LatentFrameDistribution::new(mu.clone(), sigma).unwrap();
        assert_eq!(reparameterize(&d, &Array2::zeros((2, 2))).unwrap(), mu);
        let unit =
            LatentFrameDistribution::new(Array2::zeros((2, 2)), Array2::ones((2, 2))).unwrap();
        let n = array![[0.3f32, -1.2], [2.0, 0.0]];
        assert_eq!(reparameterize(&unit, &n).unwrap(), n);
        let tiny =
            LatentFrameDistribution::new(mu.clone(), Array2::from_elem((2, 2), MIN_SIGMA as f32))
                .unwrap();
        let z = reparameterize(&tiny, &n).unwrap();
        assert!((&z - &mu).iter().all(|v| v.abs() < 1e-3));
        assert!(reparameterize(&d, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn kl_values() {
        let d = LatentFrameDistribution::new(Array2::zeros((3, 2)), Array2::ones((3, 2))).unwrap();
        assert_eq!(kl_unit_gaussian(&d).unwrap(), 0.0);
        let d = LatentFrameDistribution::new(array![[1.0f32]], array![[1.0f32]]).unwrap();
        assert_eq!(kl_unit_gaussian(&d).unwrap(), 0.5);
        let mut prev = 0.0;
        for s in [1e-1f32, 1e-2, 1e-3, 1e-4] {
            let d = LatentFrameDistribution::new(array![[0.0f32]], array![[s]]).unwrap();
            let kl = kl_unit_gaussian(&d).unwrap();
            assert!(kl > prev);
            prev = kl;
        }
        assert!(LatentFrameDistribution::new(array![[0.0f32]], array![[0.0f32]]).is_err());
    }

    #[test]
    fn loss_total_arithmetic() {
        let dev = Device::Cpu;
        let ones = Tensor::ones(6, DType::F64, &dev).unwrap();
        let feats = vec![vec![Tensor::ones((2, 3), DType::F64, &dev).unwrap()]];
        let s = Tensor::zeros((1, 2, 5), DType::F64, &dev).unwrap();
        let s_hat = (s.clone() + 0.1).unwrap();
        let kl = Tensor::new(0.0f64, &dev).unwrap();
        let l = sfen_generator_loss(&[ones], &feats, &feats, &s, &s_hat, &kl, 45.0).unwrap();
        assert_eq!(scalar(&l.adv).unwrap(), 0.0);
        assert_eq!(scalar(&l.fm).unwrap(), 0.0);
        assert!((scalar(&l.total).unwrap() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn recon_identity_and_offset() {
        let (_, mel_cfg) = micro();
        let w = Waveform::new(
            (0..256).map(|i| (i as f32 * 0.3).sin() * 0.4).collect(),
            mel_cfg.sample_rate,
        )
        .unwrap();
        let s = mel_spectrogram(&w, &mel_cfg).unwrap();
        assert!(reconstruction_loss(&s, &w).unwrap() < 1e-6);
        let shifted = MelSpectrogram {
            frames: s.frames.mapv(|v| v + 1.0),
            config: mel_cfg,
        };
        assert!((mel_l1(&s, &shifted).unwrap() - 1.0).abs() < 1e-6);
    }
}
