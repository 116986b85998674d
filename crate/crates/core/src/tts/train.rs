//! Batching, the joint objective and the four-optimizer training loop shared
//! by the fused and codebook-only variants.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;

use super::duration::{duration_disc_loss, duration_gen_loss};
use super::text::{batch_ids, PhonemeSequence, Tokenizer};
use super::{
    alignment_loglik, alignment_tensor, disc_term, gan_terms, log_durations, mel_loss,
    monotonic_alignment_search, normal_tensor, prior_kl, Tts, GROUPS,
};
use crate::checkpoint::{Checkpoint, OPTIM_PREFIX};
use crate::codebook::SpeakerCodebook;
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::nn::{scalar, tensor_from_array, AdamW};
use crate::training::{checkpoint_path, step_rng, LossLog, LossRecord, TrainConfig};

/// One tokenized utterance with its mel frames and waveform.
#[derive(Debug, Clone)]
pub struct TtsExample {
    pub clip_id: String,
    pub speaker_id: String,
    pub seq: PhonemeSequence,
    /// `T x n_mels`.
    pub mel: Array2<f32>,
    pub wave: Vec<f32>,
}

impl TtsExample {
    pub fn from_clip(clip: &Clip, tokenizer: &dyn Tokenizer) -> Result<Self> {
        Ok(Self {
            clip_id: clip.id.clone(),
            speaker_id: clip.speaker_id.clone(),
            seq: tokenizer.encode(&clip.transcript)?,
            mel: clip.mel.frames.clone(),
            wave: clip.wave.samples.clone(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.mel.nrows()
    }
}

/// Checks that every example can be aligned, windowed and conditioned.
pub fn check_examples(
    examples: &[TtsExample],
    codebooks: &BTreeMap<String, SpeakerCodebook>,
    model: &Tts,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let hop = model.cfg.hop_size();
    for e in examples {
        if !codebooks.contains_key(&e.speaker_id) {
            return Err(Error::Input(format!(
                "no codebook for speaker `{}` (clip `{}`)",
                e.speaker_id, e.clip_id
            )));
        }
        if e.n_frames() < e.seq.len() {
            return Err(Error::Infeasible(format!(
                "clip `{}` has {} frames for {} symbols",
                e.clip_id,
                e.n_frames(),
                e.seq.len()
            )));
        }
        if e.wave.len() / hop < model.cfg.segment_frames {
            return Err(Error::Length(format!(
                "clip `{}` is shorter than {} frames",
                e.clip_id, model.cfg.segment_frames
            )));
        }
        if e.mel.ncols() != model.mel_cfg.n_mels {
            return Err(Error::Dimension(format!(
                "clip `{}` has {} mel bins, model expects {}",
                e.clip_id,
                e.mel.ncols(),
                model.mel_cfg.n_mels
            )));
        }
    }
    Ok(())
}

/// Padded model inputs plus every random draw a step needs.
#[derive(Debug, Clone)]
pub struct TtsBatch {
    pub ids: Tensor,
    /// `(B, 1, L)`.
    pub text_mask: Tensor,
    /// `(B, n_mels, T)`.
    pub mel: Tensor,
    /// `(B, 1, T)`.
    pub mel_mask: Tensor,
    pub frames: Vec<usize>,
    /// Posterior noise `(B, C, T)`.
    pub eps: Tensor,
    /// Duration noise `(B, noise_dim, L)`.
    pub z_d: Tensor,
    /// Decoder window start frame per item.
    pub seg_starts: Vec<usize>,
    /// Target waveform windows `(B, 1, segment_frames * hop)`.
    pub wave: Tensor,
    /// Raw codebook rows `(1, K, H)` per item.
    pub codebooks: Vec<Tensor>,
}

impl TtsBatch {
    pub fn new<R: Rng + ?Sized>(
        model: &Tts,
        items: &[&TtsExample],
        codebooks: &BTreeMap<String, SpeakerCodebook>,
        rng: &mut R,
    ) -> Result<Self> {
        let (dtype, dev) = (model.dtype(), model.device());
        let cfg = &model.cfg;
        let hop = cfg.hop_size();
        let seg = cfg.segment_frames;
        let seqs: Vec<&PhonemeSequence> = items.iter().map(|e| &e.seq).collect();
        let (ids, text_mask, lengths) = batch_ids(&seqs, dtype, dev)?;
        let frames: Vec<usize> = items.iter().map(|e| e.n_frames()).collect();
        let t_max = *frames.iter().max().unwrap_or(&0);
        let n_mels = model.mel_cfg.n_mels;
        let mut mels = Vec::with_capacity(items.len());
        let mut waves = Vec::with_capacity(items.len());
        let mut seg_starts = Vec::with_capacity(items.len());
        let mut cbs = Vec::with_capacity(items.len());
        for e in items {
            let mut m = Array2::<f32>::from_elem((t_max, n_mels), 0.0);
            m.slice_mut(ndarray::s![..e.n_frames(), ..]).assign(&e.mel);
            mels.push(tensor_from_array(&m, dtype, dev)?.t()?);
            let last = (e.wave.len() / hop).min(e.n_frames()) - seg;
            let s = rng.random_range(0..=last);
            seg_starts.push(s);
            let w = e.wave[s * hop..(s + seg) * hop].to_vec();
            waves.push(Tensor::from_vec(w, (1, seg * hop), dev)?.to_dtype(dtype)?);
            let cb = codebooks.get(&e.speaker_id).ok_or_else(|| {
                Error::Input(format!("no codebook for speaker `{}`", e.speaker_id))
            })?;
            cbs.push(tensor_from_array(&cb.vectors, dtype, dev)?.unsqueeze(0)?);
        }
        let l_max = *lengths.iter().max().unwrap_or(&0);
        let eps = normal_tensor(rng, (items.len(), cfg.latent_channels, t_max), dtype, dev)?;
        let z_d = normal_tensor(
            rng,
            (items.len(), cfg.duration_noise_dim, l_max),
            dtype,
            dev,
        )?;
        Ok(Self {
            ids,
            text_mask,
            mel: Tensor::stack(&mels, 0)?,
            mel_mask: crate::nn::sequence_mask(&frames, t_max, dtype, dev)?,
            frames,
            eps,
            z_d,
            seg_starts,
            wave: Tensor::stack(&waves, 0)?,
            codebooks: cbs,
        })
    }
}

/// Intermediate results of one forward pass.
pub struct TtsForward {
    pub kl: Tensor,
    /// MAS log-durations `(B, 1, L)`.
    pub d: Tensor,
    pub d_hat: Tensor,
    pub h_text: Tensor,
    pub text_mask: Tensor,
    pub durations: Vec<Vec<usize>>,
    /// Decoded windows `(B, 1, S)` and their targets.
    pub y_hat: Tensor,
    pub y: Tensor,
}

pub fn forward(model: &Tts, batch: &TtsBatch) -> Result<TtsForward> {
    let mask = &batch.text_mask;
    let memories = batch
        .codebooks
        .iter()
        .map(|c| model.codebook_encoder.forward(c))
        .collect::<Result<Vec<_>>>()?;
    let h_text = model.text_features(&batch.ids, mask, &memories)?;
    let (m_p, logs_p) = model.prior_stats(&h_text, mask)?;
    let (z, _m_q, logs_q) = model
        .posterior
        .forward(&batch.mel, &batch.mel_mask, &batch.eps)?;
    let (z_p, logdet) = model.flow.forward(&z, &batch.mel_mask, None)?;

    let ll = alignment_loglik(&z_p.detach(), &m_p.detach(), &logs_p.detach())?
        .to_dtype(DType::F64)?
        .to_vec3::<f64>()?;
    let lengths: Vec<usize> = mask
        .sum(1)?
        .sum(1)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|v| v.round() as usize)
        .collect();
    let mut durations = Vec::with_capacity(lengths.len());
    for (b, (&l, &t)) in lengths.iter().zip(&batch.frames).enumerate() {
        let q = ndarray::Array2::from_shape_fn((l, t), |(i, j)| ll[b][i][j]);
        durations.push(monotonic_alignment_search(&q)?.durations);
    }
    let l_max = mask.dim(2)?;
    let t_max = batch.mel_mask.dim(2)?;
    let attn = alignment_tensor(&durations, l_max, model.dtype(), model.device())?;
    let attn = attn.pad_with_zeros(2, 0, t_max - attn.dim(2)?)?;
    let m_exp = m_p.matmul(&attn)?;
    let logs_exp = logs_p.matmul(&attn)?;
    let kl = prior_kl(&z_p, &logs_q, &m_exp, &logs_exp, &logdet, &batch.mel_mask)?;

    let d = log_durations(&durations, l_max, model.dtype(), model.device())?;
    let h_det = h_text.detach().transpose(1, 2)?;
    let d_hat = model.dur_gen.forward(&h_det, &batch.z_d, mask)?;

    let seg = model.cfg.segment_frames;
    let windows = batch
        .seg_starts
        .iter()
        .enumerate()
        .map(|(b, &s)| z.narrow(0, b, 1)?.narrow(2, s, seg))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let y_hat = model.decoder.forward(&Tensor::cat(&windows, 0)?)?;
    Ok(TtsForward {
        kl,
        d,
        d_hat,
        h_text,
        text_mask: mask.clone(),
        durations,
        y_hat,
        y: batch.wave.clone(),
    })
}

/// Generator-side losses. `total` is what the generator step minimizes:
/// `adv + fm + lambda_mel * mel + kl + dur_adv + lambda_dp * dur_mse`.
pub struct TtsGenLoss {
    pub total: Tensor,
    pub main: Tensor,
    pub adv: Tensor,
    pub fm: Tensor,
    pub mel: Tensor,
    pub kl: Tensor,
    pub dur_adv: Tensor,
    pub dur_mse: Tensor,
}

impl TtsGenLoss {
    pub fn push_terms(&self, rec: &mut LossRecord) -> Result<()> {
        for (name, t) in [
            ("gen_total", &self.main),
            ("adv", &self.adv),
            ("fm", &self.fm),
            ("mel", &self.mel),
            ("kl", &self.kl),
            ("dur_adv", &self.dur_adv),
            ("dur_mse", &self.dur_mse),
        ] {
            rec.push(name, scalar(t)?);
        }
        Ok(())
    }
}

pub fn generator_loss(model: &Tts, f: &TtsForward) -> Result<TtsGenLoss> {
    let (adv, fm) = gan_terms(&model.discriminator, &f.y, &f.y_hat)?;
    let mel = mel_loss(model.mel_transform(), &f.y, &f.y_hat)?;
    let main = (((&adv + &fm)? + (&mel * model.cfg.lambda_mel)?)? + &f.kl)?;
    let h_det = f.h_text.detach().transpose(1, 2)?;
    let fake = model.dur_disc.forward(&f.d_hat, &h_det, &f.text_mask)?;
    let dur = duration_gen_loss(&fake, &f.d_hat, &f.d, &f.text_mask, model.cfg.lambda_dp)?;
    Ok(TtsGenLoss {
        total: (&main + &dur.total)?,
        main,
        adv,
        fm,
        mel,
        kl: f.kl.clone(),
        dur_adv: dur.adv,
        dur_mse: dur.mse,
    })
}

/// Waveform and duration discriminator losses.
pub fn discriminator_losses(model: &Tts, f: &TtsForward) -> Result<(Tensor, Tensor)> {
    let disc = disc_term(&model.discriminator, &f.y, &f.y_hat)?;
    let h_det = f.h_text.detach().transpose(1, 2)?;
    let real = model.dur_disc.forward(&f.d, &h_det, &f.text_mask)?;
    let fake = model
        .dur_disc
        .forward(&f.d_hat.detach(), &h_det, &f.text_mask)?;
    Ok((disc, duration_disc_loss(&real, &fake, &f.text_mask)?))
}

fn group_key(group: &str) -> String {
    format!("{OPTIM_PREFIX}{}", group.trim_end_matches('.'))
}

/// Joint optimization with one optimizer per parameter group.
pub struct TtsTrainer {
    pub model: Tts,
    pub train: TrainConfig,
    opts: Vec<AdamW>,
    step: u64,
    steps_per_epoch: u64,
}

impl TtsTrainer {
    pub fn new(model: Tts, train: &TrainConfig, n_examples: usize) -> Result<Self> {
        train.validate()?;
        let opts = GROUPS
            .iter()
            .map(|g| AdamW::new(model.group_vars(g), train.optimizer.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            train: train.clone(),
            opts,
            step: 0,
            steps_per_epoch: train.steps_per_epoch(n_examples),
        })
    }

    pub fn resume(
        ck: &Checkpoint,
        train: &TrainConfig,
        n_examples: usize,
        device: &Device,
    ) -> Result<Self> {
        let model = Tts::from_checkpoint(ck, DType::F32, device)?;
        let mut t = Self::new(model, train, n_examples)?;
        let state = ck.optimizer_state();
        for (g, opt) in GROUPS.iter().zip(t.opts.iter_mut()) {
            opt.import_state(&group_key(g), &state, ck.step)?;
        }
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
        self.opts[0].learning_rate()
    }

    /// Discriminator updates (waveform and duration) followed by generator
    /// updates (main and duration).
    pub fn train_step(
        &mut self,
        examples: &[TtsExample],
        codebooks: &BTreeMap<String, SpeakerCodebook>,
    ) -> Result<LossRecord> {
        if examples.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let step = self.step + 1;
        let mut rng = step_rng(self.train.seed, step);
        let epoch = self.step / self.steps_per_epoch;
        for o in &mut self.opts {
            o.set_epoch(epoch);
        }
        let items: Vec<&TtsExample> = (0..self.train.batch_size)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let batch = TtsBatch::new(&self.model, &items, codebooks, &mut rng)?;
        let f = forward(&self.model, &batch)?;

        let mut rec = LossRecord::new(step);
        let (disc, dur_disc) = discriminator_losses(&self.model, &f)?;
        rec.push("disc", scalar(&disc)?);
        rec.push("dur_disc", scalar(&dur_disc)?);
        rec.check_finite()?;
        let grads = (disc + dur_disc)?.backward()?;
        self.opts[1].step(&grads)?;
        self.opts[3].step(&grads)?;

        let g = generator_loss(&self.model, &f)?;
        g.push_terms(&mut rec)?;
        rec.check_finite()?;
        let grads = g.total.backward()?;
        self.opts[0].step(&grads)?;
        self.opts[2].step(&grads)?;
        self.step = step;
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.model.store.export()?;
        for (g, opt) in GROUPS.iter().zip(&self.opts) {
            tensors.extend(opt.export_state(&group_key(g))?);
        }
        let config =
            toml::to_string(&self.model.snapshot()).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint {
            kind: self.model.kind(),
            step: self.step,
            config,
            tensors,
        })
    }

    pub fn run(
        &mut self,
        examples: &[TtsExample],
        codebooks: &BTreeMap<String, SpeakerCodebook>,
        ckpt_dir: &Path,
        log: &mut LossLog,
    ) -> Result<()> {
        check_examples(examples, codebooks, &self.model)?;
        while self.step < self.train.max_steps {
            let rec = self.train_step(examples, codebooks)?;
            log.write(&rec)?;
            if self.step % self.train.checkpoint_interval == 0 || self.step == self.train.max_steps
            {
                log.flush()?;
                self.checkpoint()?.save(&checkpoint_path(
                    ckpt_dir,
                    self.model.kind(),
                    self.step,
                ))?;
            }
        }
        log.flush()
    }
}
