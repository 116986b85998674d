//! Differentiable log-mel transform, used for reconstruction losses on
//! generated audio. Follows the same framing, window and filterbank as
//! [`crate::audio::mel_spectrogram`].

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::audio::{mel_filterbank, padded_hann_window, reflect_index, MelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MelTransform {
    cfg: MelConfig,
    /// Windowed DFT basis `(2 * n_freq, 1, fft_size)`: cosine rows then sine rows.
    dft: Tensor,
    /// `(n_mels, n_freq)`.
    basis: Tensor,
}

impl MelTransform {
    pub fn new(cfg: &MelConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.fft_size;
        let n_freq = cfg.n_freq();
        let window = padded_hann_window(cfg);
        let mut dft = vec![0f64; 2 * n_freq * n_fft];
        for k in 0..n_freq {
            for n in 0..n_fft {
                let angle = 2.0 * PI * (k * n % n_fft) as f64 / n_fft as f64;
                dft[k * n_fft + n] = window[n] * angle.cos();
                dft[(n_freq + k) * n_fft + n] = -window[n] * angle.sin();
            }
        }
        let dft = Tensor::from_vec(dft, (2 * n_freq, 1, n_fft), device)?.to_dtype(dtype)?;
        let fb = mel_filterbank(cfg);
        let basis = Tensor::from_vec(fb.into_raw_vec_and_offset().0, (cfg.n_mels, n_freq), device)?
            .to_dtype(dtype)?;
        Ok(Self {
            cfg: cfg.clone(),
            dft,
            basis,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// `wave`: `(B, N)` -> log-mel `(B, n_mels, ceil(N / hop))`.
    pub fn forward(&self, wave: &Tensor) -> Result<Tensor> {
        let (_, n) = wave.dims2()?;
        if n < self.cfg.window_size {
            return Err(Error::Length(format!(
                "waveform has {n} samples, at least {} required",
                self.cfg.window_size
            )));
        }
        let half = (self.cfg.fft_size / 2) as isize;
        let idx: Vec<u32> = (-half..n as isize + half)
            .map(|i| reflect_index(i, n) as u32)
            .collect();
        let idx = Tensor::from_vec(idx, n + 2 * half as usize, wave.device())?;
        let padded = wave.index_select(&idx, 1)?.unsqueeze(1)?;
        let spec = crate::nn::layers::conv1d(&padded, &self.dft, 0, self.cfg.hop_size, 1)?;
        let frames = self.cfg.frames_for(n);
        let spec = spec.narrow(2, 0, frames)?;
        let n_freq = self.cfg.n_freq();
        let re = spec.narrow(1, 0, n_freq)?;
        let im = spec.narrow(1, n_freq, n_freq)?;
        let mag = (re.sqr()? + im.sqr()?)?.affine(1.0, 1e-12)?.sqrt()?;
        let mel = self.basis.broadcast_matmul(&mag)?;
        let floor =
            Tensor::full(self.cfg.log_floor, mel.shape(), mel.device())?.to_dtype(mel.dtype())?;
        Ok(mel.maximum(&floor)?.log()?)
    }
}
