//! Conditional-prior text-to-speech: text encoder with codebook fusion,
//! posterior encoder, transformer-augmented flows, monotonic alignment,
//! adversarial duration predictor and waveform decoder.

pub mod duration;
pub mod flow;
pub mod mas;
pub mod text;
pub mod train;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, Waveform};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::codebook::SpeakerCodebook;
use crate::error::{Error, Result};
use crate::fts::FtsAttention;
use crate::nn::{
    tensor_from_array, Conv1d, ConvOpts, Linear, MelTransform, ParamStore, Scope, WaveNet,
};
use crate::vocoder::{
    discriminator_loss, feature_matching_loss, features, generator_adversarial_loss, logits,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};

pub use duration::{DurationDiscriminator, DurationGenerator};
pub use flow::{Flow, FlowConfig};
pub use mas::{monotonic_alignment_search, AlignmentMatrix};
pub use text::{CharTokenizer, PhonemeSequence, Tokenizer};
pub use train::{TtsBatch, TtsExample, TtsTrainer};

/// What the prior-statistics head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorInput {
    /// Text features with the codebook fused in by cross-attention.
    Text,
    /// Attention-weighted codebook values only; text sets the weights.
    Codebook,
}

impl PriorInput {
    pub fn kind(self) -> ModelKind {
        match self {
            PriorInput::Text => ModelKind::Tts,
            PriorInput::Codebook => ModelKind::Fts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsConfig {
    /// Symbol inventory of the character tokenizer, one symbol per char.
    pub text_vocab: String,
    pub prior_input: PriorInput,
    /// Codebook row width, equal to the speech-feature latent dimension.
    pub latent_dim: usize,
    pub d_model: usize,
    pub n_text_layers: usize,
    /// Number of plain text layers run before fusion.
    pub fusion_layer_index: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub codebook_layers: usize,
    /// Channels of the acoustic latent `z`.
    pub latent_channels: usize,
    pub posterior_hidden: usize,
    pub posterior_layers: usize,
    pub posterior_kernel: usize,
    pub flow: FlowConfig,
    pub duration_noise_dim: usize,
    pub duration_hidden: usize,
    pub lambda_dp: f64,
    pub lambda_mel: f64,
    pub decoder: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Decoder training window in latent frames.
    pub segment_frames: usize,
}

pub type FtsConfig = TtsConfig;

impl TtsConfig {
    pub fn paper() -> Self {
        Self {
            text_vocab: default_vocab(),
            prior_input: PriorInput::Text,
            latent_dim: 2048,
            d_model: 192,
            n_text_layers: 6,
            fusion_layer_index: 5,
            n_heads: 2,
            ffn_hidden: 768,
            codebook_layers: 1,
            latent_channels: 192,
            posterior_hidden: 192,
            posterior_layers: 16,
            posterior_kernel: 5,
            flow: FlowConfig {
                channels: 192,
                blocks: 4,
                hidden: 192,
                kernel: 5,
                wn_layers: 4,
                heads: 2,
                transformer_dim: 768,
            },
            duration_noise_dim: 192,
            duration_hidden: 256,
            lambda_dp: 1.0,
            lambda_mel: 45.0,
            decoder: GeneratorConfig::paper(),
            discriminator: DiscriminatorConfig::paper(),
            segment_frames: 8,
        }
    }

    pub fn toy() -> Self {
        let sfen = crate::sfen::SfenConfig::toy();
        Self {
            text_vocab: default_vocab(),
            prior_input: PriorInput::Text,
            latent_dim: sfen.latent_dim,
            d_model: 64,
            n_text_layers: 3,
            fusion_layer_index: 2,
            n_heads: 2,
            ffn_hidden: 128,
            codebook_layers: 1,
            latent_channels: 16,
            posterior_hidden: 64,
            posterior_layers: 4,
            posterior_kernel: 5,
            flow: FlowConfig {
                channels: 16,
                blocks: 2,
                hidden: 32,
                kernel: 5,
                wn_layers: 2,
                heads: 2,
                transformer_dim: 64,
            },
            duration_noise_dim: 8,
            duration_hidden: 64,
            lambda_dp: 1.0,
            lambda_mel: 45.0,
            decoder: sfen.generator,
            discriminator: sfen.discriminator,
            segment_frames: 16,
        }
    }

    pub fn fts_toy() -> Self {
        Self {
            prior_input: PriorInput::Codebook,
            ..Self::toy()
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.prior_input.kind()
    }

    pub fn hop_size(&self) -> usize {
        self.decoder.total_upsampling()
    }

    pub fn validate(&self, mel: &MelConfig) -> Result<()> {
        CharTokenizer::new(&self.text_vocab)?;
        let dims = [
            ("latent_dim", self.latent_dim),
            ("d_model", self.d_model),
            ("n_text_layers", self.n_text_layers),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("latent_channels", self.latent_channels),
            ("posterior_hidden", self.posterior_hidden),
            ("posterior_layers", self.posterior_layers),
            ("duration_noise_dim", self.duration_noise_dim),
            ("duration_hidden", self.duration_hidden),
            ("segment_frames", self.segment_frames),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("tts.{name} must be positive")));
        }
        if self.fusion_layer_index >= self.n_text_layers {
            return Err(Error::Config(format!(
                "fusion_layer_index {} must be below n_text_layers {}",
                self.fusion_layer_index, self.n_text_layers
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.posterior_kernel % 2 == 0 {
            return Err(Error::Config("posterior_kernel must be odd".into()));
        }
        if self.flow.channels != self.latent_channels {
            return Err(Error::Config(format!(
                "flow channels {} differ from latent_channels {}",
                self.flow.channels, self.latent_channels
            )));
        }
        if !(self.lambda_dp >= 0.0 && self.lambda_mel >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.flow.validate()?;
        self.decoder.validate()?;
        self.discriminator.validate()?;
        mel.validate()?;
        if self.hop_size() != mel.hop_size {
            return Err(Error::Config(format!(
                "decoder upsampling {} differs from mel hop size {}",
                self.hop_size(),
                mel.hop_size
            )));
        }
        Ok(())
    }
}

fn default_vocab() -> String {
    " !',-.?abcdefghijklmnopqrstuvwxyz".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TtsSnapshot {
    pub mel: MelConfig,
    pub tts: TtsConfig,
}

/// Mel spectrogram -> `(z, m_q, logs_q)`.
#[derive(Debug, Clone)]
pub struct PosteriorEncoder {
    pre: Conv1d,
    wn: WaveNet,
    proj: Conv1d,
    channels: usize,
}

impl PosteriorEncoder {
    fn new(vs: &Scope, n_mels: usize, cfg: &TtsConfig) -> Result<Self> {
        let h = cfg.posterior_hidden;
        Ok(Self {
            pre: Conv1d::new(&vs.pp("pre"), n_mels, h, 1, ConvOpts::default())?,
            wn: WaveNet::new(
                &vs.pp("wn"),
                h,
                cfg.posterior_kernel,
                1,
                cfg.posterior_layers,
                0,
            )?,
            proj: Conv1d::new(
                &vs.pp("proj"),
                h,
                2 * cfg.latent_channels,
                1,
                ConvOpts::default(),
            )?,
            channels: cfg.latent_channels,
        })
    }

    /// `mel`: `(B, n_mels, T)`, `eps`: `(B, C, T)`.
    pub fn forward(
        &self,
        mel: &Tensor,
        mask: &Tensor,
        eps: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let x = self.pre.forward(mel)?.broadcast_mul(mask)?;
        let x = self.wn.forward(&x, mask, None)?;
        let stats = self.proj.forward(&x)?.broadcast_mul(mask)?;
        let m = stats.narrow(1, 0, self.channels)?;
        let logs = stats.narrow(1, self.channels, self.channels)?;
        let z = (&m + (logs.exp()? * eps)?)?.broadcast_mul(mask)?;
        Ok((z, m, logs))
    }
}

/// The block that injects speaker information into the text pathway.
#[derive(Debug, Clone)]
pub enum PriorPath {
    Fusion(text::FusionBlock),
    Codebook(FtsAttention),
}

/// Inference-time knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub duration_noise_scale: f64,
    pub prior_noise_scale: f64,
    pub seed: u64,
    /// Multiplies every rounded duration; `1.0` for normal synthesis.
    pub duration_multiplier: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            duration_noise_scale: 0.8,
            prior_noise_scale: 0.667,
            seed: 0,
            duration_multiplier: 1.0,
        }
    }
}

/// A synthesized waveform with the frame counts used to produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub wave: Waveform,
    pub durations: Vec<usize>,
}

impl Synthesis {
    pub fn n_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Tts {
    pub cfg: TtsConfig,
    pub mel_cfg: MelConfig,
    pub store: ParamStore,
    pub tokenizer: CharTokenizer,
    pub text: text::TextEncoder,
    pub codebook_encoder: text::CodebookEncoder,
    pub prior_path: PriorPath,
    prior_proj: Linear,
    pub posterior: PosteriorEncoder,
    pub flow: Flow,
    pub decoder: Generator,
    pub discriminator: Discriminator,
    pub dur_gen: DurationGenerator,
    pub dur_disc: DurationDiscriminator,
    mel_transform: MelTransform,
    /// Ablation hook: replace the fusion attention output by zeros.
    pub fusion_disabled: bool,
}

/// Parameter groups, each with its own optimizer.
pub const GROUPS: [&str; 4] = ["main", "disc.", "dur_gen.", "dur_disc."];

impl Tts {
    pub fn new(
        cfg: &TtsConfig,
        mel_cfg: &MelConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate(mel_cfg)?;
        let store = ParamStore::new(seed, dtype, device);
        let root = store.root();
        let tokenizer = CharTokenizer::new(&cfg.text_vocab)?;
        let d = cfg.d_model;
        let text = text::TextEncoder::new(
            &root.pp("text"),
            tokenizer.vocab_size(),
            d,
            cfg.n_text_layers,
            cfg.n_heads,
            cfg.ffn_hidden,
        )?;
        let codebook_encoder = text::CodebookEncoder::new(
            &root.pp("cb"),
            cfg.latent_dim,
            d,
            cfg.codebook_layers,
            cfg.n_heads,
            cfg.ffn_hidden,
        )?;
        let prior_path = match cfg.prior_input {
            PriorInput::Text => PriorPath::Fusion(text::FusionBlock::new(
                &root.pp("fusion"),
                d,
                cfg.n_heads,
                cfg.ffn_hidden,
            )?),
            PriorInput::Codebook => {
                PriorPath::Codebook(FtsAttention::new(&root.pp("fts"), d, cfg.n_heads)?)
            }
        };
        let prior_proj = Linear::new(&root.pp("prior"), d, 2 * cfg.latent_channels)?;
        let posterior = PosteriorEncoder::new(&root.pp("post"), mel_cfg.n_mels, cfg)?;
        let flow = Flow::new(&root.pp("flow"), &cfg.flow, 0)?;
        let decoder = Generator::new(&root.pp("dec"), cfg.latent_channels, &cfg.decoder)?;
        let discriminator = Discriminator::new(&root.pp("disc"), &cfg.discriminator)?;
        let dur_gen = DurationGenerator::new(
            &root.pp("dur_gen"),
            d,
            cfg.duration_noise_dim,
            cfg.duration_hidden,
        )?;
        let dur_disc = DurationDiscriminator::new(&root.pp("dur_disc"), d, cfg.duration_hidden)?;
        let mel_transform = MelTransform::new(mel_cfg, dtype, device)?;
        Ok(Self {
            cfg: cfg.clone(),
            mel_cfg: mel_cfg.clone(),
            store,
            tokenizer,
            text,
            codebook_encoder,
            prior_path,
            prior_proj,
            posterior,
            flow,
            decoder,
            discriminator,
            dur_gen,
            dur_disc,
            mel_transform,
            fusion_disabled: false,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind()
    }

    pub fn snapshot(&self) -> TtsSnapshot {
        TtsSnapshot {
            mel: self.mel_cfg.clone(),
            tts: self.cfg.clone(),
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

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let snap: TtsSnapshot =
            toml::from_str(&ck.config).map_err(|e| Error::Format(e.to_string()))?;
        ck.expect_kind(snap.tts.kind())?;
        let model = Self::new(&snap.tts, &snap.mel, 0, dtype, device)?;
        model.store.import(&ck.parameters())?;
        Ok(model)
    }

    /// Load a checkpoint that must hold a model of `kind`.
    pub fn load(path: &Path, kind: ModelKind, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, kind)?, DType::F32, device)
    }

    /// Parameters belonging to optimizer group `group` (see [`GROUPS`]).
    pub fn group_vars(&self, group: &str) -> Vec<(String, candle_core::Var)> {
        if group == "main" {
            self.store
                .vars()
                .into_iter()
                .filter(|(n, _)| !GROUPS[1..].iter().any(|g| n.starts_with(g)))
                .collect()
        } else {
            self.store.vars_with_prefix(group)
        }
    }

    pub fn encode_text(&self, text: &str) -> Result<PhonemeSequence> {
        self.tokenizer.encode(text)
    }

    /// Codebook rows `(K, H)` -> encoded memory `(1, K, d)`.
    pub fn encode_codebook(&self, cb: &SpeakerCodebook) -> Result<Tensor> {
        let t = tensor_from_array(&cb.vectors, self.dtype(), self.device())?.unsqueeze(0)?;
        self.codebook_encoder.forward(&t)
    }

    /// Text layers that run before the speaker block.
    pub fn split_layer(&self) -> usize {
        match self.prior_path {
            PriorPath::Fusion(_) => self.cfg.fusion_layer_index,
            PriorPath::Codebook(_) => self.cfg.n_text_layers,
        }
    }

    /// Embedding plus the pre-fusion text layers: `(B, L, d)`.
    pub fn pre_fusion(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = self.text.embed(ids, mask)?;
        self.text.run(&x, mask, 0..self.split_layer())
    }

    /// Speaker block for one item: `h_prev` `(1, L, d)`, `memory` `(1, K, d)`.
    pub fn fuse(&self, h_prev: &Tensor, memory: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let row = mask.transpose(1, 2)?;
        match &self.prior_path {
            PriorPath::Fusion(f) => f.forward(h_prev, memory, &row, self.fusion_disabled),
            PriorPath::Codebook(a) => Ok(a.forward(h_prev, memory)?.broadcast_mul(&row)?),
        }
    }

    /// Text layers after the speaker block.
    pub fn post_fusion(&self, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.text
            .run(h, mask, self.split_layer()..self.cfg.n_text_layers)
    }

    /// Full conditioned text encoding of a batch; `memories[b]` is the encoded
    /// codebook of item `b`.
    pub fn text_features(
        &self,
        ids: &Tensor,
        mask: &Tensor,
        memories: &[Tensor],
    ) -> Result<Tensor> {
        let h = self.pre_fusion(ids, mask)?;
        if memories.len() != h.dim(0)? {
            return Err(Error::Dimension(format!(
                "{} codebooks for a batch of {}",
                memories.len(),
                h.dim(0)?
            )));
        }
        let fused = memories
            .iter()
            .enumerate()
            .map(|(b, m)| self.fuse(&h.narrow(0, b, 1)?, m, &mask.narrow(0, b, 1)?))
            .collect::<Result<Vec<_>>>()?;
        self.post_fusion(&Tensor::cat(&fused, 0)?, mask)
    }

    /// `h_text` `(B, L, d)` -> prior mean and log-scale, each `(B, C, L)`.
    pub fn prior_stats(&self, h_text: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let stats = self
            .prior_proj
            .forward(h_text)?
            .transpose(1, 2)?
            .broadcast_mul(mask)?;
        let c = self.cfg.latent_channels;
        Ok((stats.narrow(1, 0, c)?, stats.narrow(1, c, c)?))
    }

    /// Inference from conditioned text features of a single utterance.
    pub fn synthesize_features(
        &self,
        h_text: &Tensor,
        mask: &Tensor,
        opts: &SynthesisOptions,
    ) -> Result<Synthesis> {
        if !(opts.duration_multiplier > 0.0) {
            return Err(Error::Input("duration multiplier must be positive".into()));
        }
        let (_, l, _) = h_text.dims3()?;
        let c = self.cfg.latent_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let z_d = normal_tensor(
            &mut rng,
            (1, self.cfg.duration_noise_dim, l),
            self.dtype(),
            self.device(),
        )?;
        let z_d = (z_d * opts.duration_noise_scale)?;
        let h = h_text.transpose(1, 2)?;
        let d_hat = self.dur_gen.forward(&h, &z_d, mask)?;
        let durations: Vec<usize> = d_hat
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .into_iter()
            .map(|v| {
                let base = v.exp().round().clamp(1.0, 1e6);
                (base * opts.duration_multiplier).round().max(1.0) as usize
            })
            .collect();
        let attn = alignment_tensor(&[durations.clone()], l, self.dtype(), self.device())?;
        let t = durations.iter().sum::<usize>();
        let (m_p, logs_p) = self.prior_stats(h_text, mask)?;
        let m_p = m_p.matmul(&attn)?;
        let logs_p = logs_p.matmul(&attn)?;
        let eps = normal_tensor(&mut rng, (1, c, t), self.dtype(), self.device())?;
        let z_p = (&m_p + (logs_p.exp()? * eps)?.affine(opts.prior_noise_scale, 0.0)?)?;
        let y_mask = Tensor::ones((1, 1, t), self.dtype(), self.device())?;
        let z = self.flow.inverse(&z_p, &y_mask, None)?;
        let y = self.decoder.forward(&z)?.flatten_all()?;
        let samples = y.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Ok(Synthesis {
            wave: Waveform::new(samples, self.mel_cfg.sample_rate)?,
            durations,
        })
    }

    fn single(&self, seq: &PhonemeSequence) -> Result<(Tensor, Tensor)> {
        if seq.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        let (ids, mask, _) = text::batch_ids(&[seq], self.dtype(), self.device())?;
        Ok((ids, mask))
    }

    /// Conditioned text features `(1, L, d)` for one utterance and codebook.
    pub fn conditioned_features(
        &self,
        seq: &PhonemeSequence,
        cb: &SpeakerCodebook,
    ) -> Result<(Tensor, Tensor)> {
        let (ids, mask) = self.single(seq)?;
        let memory = self.encode_codebook(cb)?;
        Ok((self.text_features(&ids, &mask, &[memory])?, mask))
    }

    pub fn synthesize(
        &self,
        seq: &PhonemeSequence,
        cb: &SpeakerCodebook,
        opts: &SynthesisOptions,
    ) -> Result<Synthesis> {
        let (h, mask) = self.conditioned_features(seq, cb)?;
        self.synthesize_features(&h, &mask, opts)
    }

    /// Pre-fusion features `(1, L, d)` and mask of one utterance.
    pub fn pre_fusion_single(&self, seq: &PhonemeSequence) -> Result<(Tensor, Tensor)> {
        let (ids, mask) = self.single(seq)?;
        Ok((self.pre_fusion(&ids, &mask)?, mask))
    }

    /// Scalar-valued generator and discriminator objectives on a batch.
    pub fn objective(&self, batch: &TtsBatch) -> Result<train::TtsForward> {
        train::forward(self, batch)
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f32> = (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Dense `(B, L, T)` 0/1 expansion matrices from per-item durations; items
/// shorter than `l` text positions or the longest item are zero-padded.
pub fn alignment_tensor(
    durations: &[Vec<usize>],
    l: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let t = durations
        .iter()
        .map(|d| d.iter().sum::<usize>())
        .max()
        .unwrap_or(0);
    let b = durations.len();
    let mut data = vec![0f32; b * l * t];
    for (i, d) in durations.iter().enumerate() {
        let mut frame = 0;
        for (j, &n) in d.iter().enumerate() {
            for f in frame..frame + n {
                data[i * l * t + j * t + f] = 1.0;
            }
            frame += n;
        }
    }
    Ok(Tensor::from_vec(data, (b, l, t), device)?.to_dtype(dtype)?)
}

/// Log-likelihood `(B, L, T)` of each latent frame under each text
/// position's diagonal Gaussian.
pub fn alignment_loglik(z_p: &Tensor, m_p: &Tensor, logs_p: &Tensor) -> Result<Tensor> {
    let w = (logs_p * -2.0)?.exp()?;
    let c1 = (logs_p.affine(-1.0, -0.5 * (2.0 * std::f64::consts::PI).ln())?)
        .sum_keepdim(1)?
        .transpose(1, 2)?;
    let wt = w.transpose(1, 2)?.contiguous()?;
    let c2 = (wt.matmul(&z_p.sqr()?.contiguous()?)? * -0.5)?;
    let c3 = (m_p * &w)?
        .transpose(1, 2)?
        .contiguous()?
        .matmul(&z_p.contiguous()?)?;
    let c4 = ((m_p.sqr()? * &w)? * -0.5)?
        .sum_keepdim(1)?
        .transpose(1, 2)?;
    Ok(c2.add(&c3)?.broadcast_add(&c1)?.broadcast_add(&c4)?)
}

/// Masked KL between the flowed posterior and the expanded prior, per frame:
/// `(sum[(logs_p - logs_q - 1/2) + (z_p - m_p)^2 e^{-2 logs_p} / 2] - sum logdet) / sum mask`.
pub fn prior_kl(
    z_p: &Tensor,
    logs_q: &Tensor,
    m_p: &Tensor,
    logs_p: &Tensor,
    logdet: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    let a = ((logs_p - logs_q)? - 0.5)?;
    let b = ((z_p - m_p)?.sqr()? * (logs_p * -2.0)?.exp()?)?.affine(0.5, 0.0)?;
    let per = (a + b)?.broadcast_mul(mask)?.sum_all()?;
    let n = mask.sum_all()?;
    Ok(((per - logdet.sum_all()?)? / n)?)
}

/// Mean absolute log-mel difference between two waveform batches.
pub(crate) fn mel_loss(mt: &MelTransform, y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    let s = mt.forward(&y.squeeze(1)?)?;
    let s_hat = mt.forward(&y_hat.squeeze(1)?)?;
    Ok((s - s_hat)?.abs()?.mean_all()?)
}

pub(crate) fn gan_terms(
    disc: &Discriminator,
    y: &Tensor,
    y_hat: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let real = disc.forward(y)?;
    let fake = disc.forward(y_hat)?;
    let feat_real: Vec<Vec<Tensor>> = features(&real)
        .into_iter()
        .map(|fs| fs.into_iter().map(|f| f.detach()).collect())
        .collect();
    let adv = generator_adversarial_loss(&logits(&fake))?;
    let fm = feature_matching_loss(&feat_real, &features(&fake))?;
    Ok((adv, fm))
}

pub(crate) fn disc_term(disc: &Discriminator, y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    let real = disc.forward(y)?;
    let fake = disc.forward(&y_hat.detach())?;
    discriminator_loss(&logits(&real), &logits(&fake))
}

/// Names of the parameters copied by [`init_decoder_from_sfen`]: upsampling
/// stages 1.. with their residual blocks, plus the whole discriminator.
pub fn decoder_transfer_names(names: &[String], n_stages: usize) -> Vec<String> {
    names
        .iter()
        .filter(|n| {
            n.starts_with("disc.")
                || (1..n_stages).any(|s| {
                    let [ups, res] = Generator::stage_prefixes(s);
                    n.starts_with(&format!("dec.{ups}")) || n.starts_with(&format!("dec.{res}"))
                })
        })
        .cloned()
        .collect()
}

/// Copy the later decoder stages and the discriminator from an SFEN
/// checkpoint. Returns the copied names. Fails, listing every offending
/// tensor, when names are missing or shapes differ.
pub fn init_decoder_from_sfen(model: &Tts, sfen: &Checkpoint) -> Result<Vec<String>> {
    sfen.expect_kind(ModelKind::Sfen)?;
    let names = decoder_transfer_names(
        &model.store.names(),
        model.cfg.decoder.upsample_factors.len(),
    );
    let mut bad = Vec::new();
    let mut copies = Vec::with_capacity(names.len());
    for name in &names {
        let var = model.store.var(name).expect("name from store");
        match sfen.tensor(name) {
            Some(src) if src.shape == var.as_tensor().dims() => copies.push((name.clone(), src)),
            Some(src) => bad.push(format!(
                "{name} ({:?} vs {:?})",
                src.shape,
                var.as_tensor().dims()
            )),
            None => bad.push(format!("{name} (missing in source)")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::ShapeMismatch(bad));
    }
    for (name, src) in copies {
        model
            .store
            .set(&name, &src.to_tensor(model.dtype(), model.device())?)?;
    }
    Ok(names)
}

/// Log-durations `(B, 1, L)` from integer durations, zero at padding.
pub(crate) fn log_durations(
    durations: &[Vec<usize>],
    l: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut v = vec![0f32; durations.len() * l];
    for (b, d) in durations.iter().enumerate() {
        for (j, &n) in d.iter().enumerate() {
            v[b * l + j] = (n as f32).ln();
        }
    }
    Ok(Tensor::from_vec(v, (durations.len(), 1, l), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::array_from_tensor;

    #[test]
    fn config_checks() {
        let mel = MelConfig {
            fft_size: 1024,
            window_size: 1024,
            hop_size: 256,
            ..MelConfig::default()
        };
        TtsConfig::toy().validate(&mel).unwrap();
        let mut c = TtsConfig::toy();
        c.fusion_layer_index = c.n_text_layers;
        assert!(c.validate(&mel).is_err());
        let mut c = TtsConfig::toy();
        c.flow.channels = 8;
        assert!(c.validate(&mel).is_err());
        assert!(TtsConfig::toy().validate(&MelConfig::default()).is_err());
    }

    #[test]
    fn alignment_expansion() {
        let a = alignment_tensor(&[vec![2, 1], vec![1]], 2, DType::F32, &Device::Cpu).unwrap();
        let a0 = array_from_tensor(&a.narrow(0, 0, 1).unwrap().squeeze(0).unwrap()).unwrap();
        assert_eq!(a0, ndarray::array![[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let a1 = array_from_tensor(&a.narrow(0, 1, 1).unwrap().squeeze(0).unwrap()).unwrap();
        assert_eq!(a1, ndarray::array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    }

    #[test]
    fn loglik_matches_direct_sum() {
        let dev = Device::Cpu;
        let z = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let m = Tensor::randn(0f64, 1.0, (1, 3, 2), &dev).unwrap();
        let s = Tensor::randn(0f64, 0.3, (1, 3, 2), &dev).unwrap();
        let ll = alignment_loglik(&z, &m, &s)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        let z = z.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let m = m.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let s = s.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for l in 0..2 {
            for t in 0..4 {
                let want: f64 = (0..3)
                    .map(|c| {
                        let var = (2.0 * s[c][l]).exp();
                        -0.5 * (2.0 * std::f64::consts::PI).ln()
                            - s[c][l]
                            - (z[c][t] - m[c][l]).powi(2) / (2.0 * var)
                    })
                    .sum();
                assert!((ll[l][t] - want).abs() < 1e-9);
            }
        }
    }
}
