//! Audio front-end: WAV I/O, resampling, silence trimming, log-mel extraction
//! and hop-aligned segment sampling.
//!
//! Frame convention used everywhere in the crate: the signal is reflect-padded
//! by `fft_size / 2` on both sides and frame `t` starts at `t * hop_size` of the
//! padded signal, for `t in 0..ceil(len / hop_size)`. Frame `t` is therefore
//! centered on sample `t * hop_size`, and a clip whose length is a multiple of
//! the hop has exactly `len / hop_size` frames.

use std::f64::consts::PI;
use std::io::{Read, Seek};
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_SAMPLE_RATE: u32 = 22050;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// STFT and mel projection parameters shared by every model in a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub fft_size: usize,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    /// Magnitudes are clamped to at least this value before the natural log.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            fft_size: 2048,
            window_size: 2048,
            hop_size: 1024,
            n_mels: 80,
            sample_rate: CANONICAL_SAMPLE_RATE,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.hop_size == 0 || self.window_size == 0 {
            return Err(Error::Config(
                "fft, window and hop sizes must be positive".into(),
            ));
        }
        if self.window_size > self.fft_size {
            return Err(Error::Config(format!(
                "window_size {} exceeds fft_size {}",
                self.window_size, self.fft_size
            )));
        }
        if self.hop_size > self.window_size {
            return Err(Error::Config(format!(
                "hop_size {} exceeds window_size {}",
                self.hop_size, self.window_size
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_freq(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop_size)
    }

    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// Time-major log-mel energies (`T x n_mels`).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        mel * F_SP
    }
}

/// Band edges of the filterbank: `n_mels + 2` frequencies equally spaced on
/// the Slaney mel scale between 0 Hz and Nyquist.
fn mel_band_edges(cfg: &MelConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(top * i as f64 / (n - 1) as f64))
        .collect()
}

/// Center frequency (Hz) of every mel filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    mel_band_edges(cfg)[1..=cfg.n_mels].to_vec()
}

/// Slaney-normalized triangular filterbank, `n_mels x n_freq`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let edges = mel_band_edges(cfg);
    let n_freq = cfg.n_freq();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_freq));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for k in 0..n_freq {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            fb[[m, k]] = w * enorm;
        }
    }
    fb
}

/// Periodic Hann window of `window_size`, zero-padded and centered in `fft_size`.
pub fn padded_hann_window(cfg: &MelConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.fft_size];
    let offset = (cfg.fft_size - cfg.window_size) / 2;
    for i in 0..cfg.window_size {
        out[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window_size as f64).cos();
    }
    out
}

/// Reflect an out-of-range index back into `0..len` (numpy "reflect" mode,
/// folded repeatedly for very short signals).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Log-mel spectrogram of a waveform.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Input(format!(
            "waveform rate {} does not match mel config rate {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.len() < cfg.window_size {
        return Err(Error::Length(format!(
            "waveform has {} samples, at least {} required",
            w.len(),
            cfg.window_size
        )));
    }
    let window = padded_hann_window(cfg);
    let basis = mel_filterbank(cfg);
    let n = w.len();
    let n_frames = cfg.frames_for(n);
    let half = (cfg.fft_size / 2) as isize;
    let n_freq = cfg.n_freq();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut mag = vec![0.0f64; n_freq];
    let mut frames = Array2::<f32>::zeros((n_frames, cfg.n_mels));
    for t in 0..n_frames {
        let start = (t * cfg.hop_size) as isize - half;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + k as isize, n);
            *slot = Complex::new(w.samples[idx] as f64 * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = basis.row(m).iter().zip(&mag).map(|(b, x)| b * x).sum();
            frames[[t, m]] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    Ok(MelSpectrogram {
        frames,
        config: cfg.clone(),
    })
}

/// Remove leading and trailing regions whose 20 ms RMS falls below
/// `threshold_db` relative to the loudest window.
pub fn trim_silence(w: &Waveform, threshold_db: f64) -> Result<Waveform> {
    if !(threshold_db < 0.0) {
        return Err(Error::Input("threshold_db must be negative".into()));
    }
    let win = ((w.sample_rate as usize) / 50).max(1);
    let rms: Vec<f64> = w
        .samples
        .chunks(win)
        .map(|c| (c.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let peak = rms.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::Input("waveform is entirely silent".into()));
    }
    let gate = peak * 10f64.powf(threshold_db / 20.0);
    let first = rms.iter().position(|&r| r >= gate).unwrap_or(0);
    let last = rms
        .iter()
        .rposition(|&r| r >= gate)
        .unwrap_or(rms.len() - 1);
    let start = first * win;
    let end = ((last + 1) * win).min(w.len());
    Waveform::new(w.samples[start..end].to_vec(), w.sample_rate)
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Input("target rate must be positive".into()));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    const ZERO_CROSSINGS: f64 = 16.0;
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let cutoff = ratio.min(1.0);
    let out_len = ((w.len() as f64) * ratio).round() as usize;
    let half_width = ZERO_CROSSINGS / cutoff;
    let n = w.len() as isize;
    let samples = (0..out_len)
        .map(|i| {
            let center = i as f64 / ratio;
            let lo = (center - half_width).ceil() as isize;
            let hi = (center + half_width).floor() as isize;
            let mut acc = 0.0f64;
            for j in lo.max(0)..=hi.min(n - 1) {
                let x = j as f64 - center;
                let arg = x * cutoff;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * arg).sin() / (PI * arg)
                };
                let win = 0.5 + 0.5 * (PI * x / half_width).cos();
                acc += w.samples[j as usize] as f64 * sinc * cutoff * win;
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform::new(samples, target_rate)
}

/// Decode a PCM WAV stream, downmix to mono and resample to `target_rate`.
pub fn read_waveform<R: Read + Seek>(reader: R, target_rate: u32) -> Result<Waveform> {
    let mut wav = hound::WavReader::new(reader).map_err(|e| Error::Format(e.to_string()))?;
    let spec = wav.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("wav declares zero channels".into()));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Format(format!(
                    "unsupported float width {}",
                    spec.bits_per_sample
                )));
            }
            wav.samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(e.to_string()))?
        }
        hound::SampleFormat::Int => {
            if !(8..=32).contains(&spec.bits_per_sample) {
                return Err(Error::Format(format!(
                    "unsupported integer width {}",
                    spec.bits_per_sample
                )));
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            wav.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(e.to_string()))?
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| (frame.iter().sum::<f32>() / channels as f32).clamp(-1.0, 1.0))
        .collect();
    let w = Waveform::new(mono, spec.sample_rate)?;
    resample(&w, target_rate)
}

pub fn load_waveform(path: &Path, target_rate: u32) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_waveform(std::io::BufReader::new(file), target_rate)
}

/// Write 16-bit mono PCM. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Format(e.to_string()))
}

/// Pick a hop-aligned window from an already computed whole-clip mel.
pub fn sample_segment_with_mel<R: Rng + ?Sized>(
    w: &Waveform,
    mel: &MelSpectrogram,
    segment_samples: usize,
    rng: &mut R,
) -> Result<(Waveform, MelSpectrogram)> {
    let hop = mel.config.hop_size;
    if segment_samples == 0 || segment_samples % hop != 0 {
        return Err(Error::Input(format!(
            "segment of {segment_samples} samples is not a positive multiple of hop {hop}"
        )));
    }
    if w.len() < segment_samples {
        return Err(Error::Length(format!(
            "waveform has {} samples, segment needs {segment_samples}",
            w.len()
        )));
    }
    let n_offsets = (w.len() - segment_samples) / hop + 1;
    let k = rng.random_range(0..n_offsets);
    let frames = segment_samples / hop;
    if k + frames > mel.n_frames() {
        return Err(Error::Dimension(format!(
            "mel has {} frames, segment ends at frame {}",
            mel.n_frames(),
            k + frames
        )));
    }
    let start = k * hop;
    let seg = Waveform::new(
        w.samples[start..start + segment_samples].to_vec(),
        w.sample_rate,
    )?;
    let seg_mel = MelSpectrogram {
        frames: mel.frames.slice(s![k..k + frames, ..]).to_owned(),
        config: mel.config.clone(),
    };
    Ok((seg, seg_mel))
}

/// Random hop-aligned training window and its mel rows.
pub fn sample_segment<R: Rng + ?Sized>(
    w: &Waveform,
    cfg: &MelConfig,
    segment_samples: usize,
    rng: &mut R,
) -> Result<(Waveform, MelSpectrogram)> {
    if w.len() < segment_samples {
        return Err(Error::Length(format!(
            "waveform has {} samples, segment needs {segment_samples}",
            w.len()
        )));
    }
    let mel = mel_spectrogram(w, cfg)?;
    sample_segment_with_mel(w, &mel, segment_samples, rng)
}
