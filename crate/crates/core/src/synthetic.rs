//! Seeded toy corpus: each speaker is a fundamental frequency and spectral
//! tilt, each text symbol a pair of formant resonances. Useful for smoke runs
//! and training tests where real recordings are unavailable.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::data::{Manifest, ManifestEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub clips_per_speaker: usize,
    pub sample_rate: u32,
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Per-symbol duration range in seconds.
    pub symbol_secs: (f64, f64),
    /// Silence added before and after each clip, in seconds.
    pub margin_secs: f64,
    pub alphabet: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_speakers: 2,
            clips_per_speaker: 12,
            sample_rate: 22050,
            min_symbols: 20,
            max_symbols: 30,
            symbol_secs: (0.12, 0.25),
            margin_secs: 0.15,
            alphabet: "aeioumnsk ".into(),
            seed: 0,
        }
    }
}

fn formants(symbol: char, alphabet: &str) -> (f64, f64) {
    let idx = alphabet.chars().position(|c| c == symbol).unwrap_or(0) as f64;
    let n = alphabet.chars().count().max(1) as f64;
    (
        300.0 + 600.0 * idx / n,
        1000.0 + 1800.0 * ((idx * 3.0) % n) / n,
    )
}

/// Render `text` with the voice of speaker number `speaker`.
pub fn render(text: &str, speaker: usize, spec: &SyntheticSpec, rng: &mut impl Rng) -> Waveform {
    let sr = spec.sample_rate as f64;
    let f0 = 110.0 + 70.0 * speaker as f64;
    let tilt = 0.6 + 0.25 * (speaker % 3) as f64;
    let margin = (spec.margin_secs * sr) as usize;
    let mut samples = vec![0f32; margin];
    let mut phase = 0.0f64;
    for c in text.chars() {
        let secs = rng.random_range(spec.symbol_secs.0..=spec.symbol_secs.1);
        let n = (secs * sr) as usize;
        if c == ' ' {
            samples.extend((0..n).map(|_| rng.random_range(-1e-4f32..1e-4)));
            continue;
        }
        let (fa, fb) = formants(c, &spec.alphabet);
        let vibrato = rng.random_range(0.97..1.03);
        for i in 0..n {
            let t = i as f64 / n as f64;
            let env = (PI * t).sin().powf(0.5);
            let f = f0 * vibrato * (1.0 + 0.03 * (2.0 * PI * t).sin());
            phase += 2.0 * PI * f / sr;
            let mut acc = 0.0;
            let mut h = 1.0;
            while h * f < sr / 2.0 && h <= 40.0 {
                let fh = h * f;
                let res = (-((fh - fa) / 150.0).powi(2)).exp()
                    + 0.6 * (-((fh - fb) / 250.0).powi(2)).exp();
                acc += (res + 0.05) * (phase * h).sin() / h.powf(tilt);
                h += 1.0;
            }
            let noise = rng.random_range(-1.0..1.0) * 0.003;
            samples.push((0.25 * env * acc + noise) as f32);
        }
    }
    samples.extend(std::iter::repeat_n(0f32, margin));
    let peak = samples.iter().fold(0f32, |m, s| m.max(s.abs())).max(1e-6);
    let samples = samples.into_iter().map(|s| s / peak * 0.8).collect();
    Waveform::new(samples, spec.sample_rate).expect("finite by construction")
}

fn random_text(spec: &SyntheticSpec, rng: &mut impl Rng) -> String {
    let letters: Vec<char> = spec.alphabet.chars().filter(|c| *c != ' ').collect();
    let n = rng.random_range(spec.min_symbols..=spec.max_symbols);
    let mut s = String::with_capacity(n);
    for i in 0..n {
        if i > 0
            && i + 1 < n
            && spec.alphabet.contains(' ')
            && rng.random_bool(0.15)
            && !s.ends_with(' ')
        {
            s.push(' ');
        } else {
            s.push(letters[rng.random_range(0..letters.len())]);
        }
    }
    s
}

/// Clips of the corpus in manifest order, with relative paths
/// `wavs/<clip_id>.wav`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<(ManifestEntry, Waveform)>> {
    if spec.n_speakers == 0 || spec.clips_per_speaker == 0 {
        return Err(Error::Config(
            "synthetic corpus needs speakers and clips".into(),
        ));
    }
    if spec.min_symbols == 0 || spec.min_symbols > spec.max_symbols {
        return Err(Error::Config("invalid symbol count range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for s in 0..spec.n_speakers {
        for c in 0..spec.clips_per_speaker {
            let text = random_text(spec, &mut rng);
            let wave = render(&text, s, spec, &mut rng);
            let clip_id = format!("spk{s}_{c:03}");
            out.push((
                ManifestEntry {
                    clip_id: clip_id.clone(),
                    speaker_id: format!("spk{s}"),
                    path: PathBuf::from("wavs").join(format!("{clip_id}.wav")),
                    transcript: text,
                },
                wave,
            ));
        }
    }
    Ok(out)
}

/// Write the WAV files and `manifest.jsonl` under `dir`.
pub fn write_corpus(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    let clips = generate(spec)?;
    let wav_dir = dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (entry, wave) in clips {
        write_wav(&dir.join(&entry.path), &wave)?;
        entries.push(entry);
    }
    let manifest = Manifest::new(entries)?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
