//! Clip manifests, the preprocessing cache and in-memory training clips.
//!
//! A manifest is JSONL with one `{clip_id, speaker_id, path, transcript}`
//! record per line. Relative audio paths resolve against a base directory.
//!
//! The preprocessing cache directory holds `audio/<clip_id>.wav` (trimmed,
//! resampled, 32-bit float), `mel/<clip_id>.mel` and `index.jsonl`. Each index
//! record carries a SHA-256 over the source bytes and the audio settings, so
//! reruns skip clips whose inputs did not change.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{
    mel_spectrogram, read_waveform, trim_silence, MelConfig, MelSpectrogram, Waveform,
};
use crate::binfmt::{read_file, unseal, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub transcript: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn check_id(kind: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && id != "."
        && id != "..";
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "{kind} `{id}` must be non-empty [A-Za-z0-9_.-]"
        )))
    }
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            check_id("clip id", &e.clip_id)?;
            check_id("speaker id", &e.speaker_id)?;
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Input(format!("duplicate clip id `{}`", e.clip_id)));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(buf, "{line}").expect("write to vec");
        }
        write_atomic(path, &buf)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn speakers(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.speaker_id.clone()).collect()
    }
}

/// A preprocessed clip: trimmed waveform at the model rate and its mel.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub speaker_id: String,
    pub transcript: String,
    pub wave: Waveform,
    pub mel: MelSpectrogram,
}

/// Audio front-end settings applied during preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub mel: MelConfig,
    pub trim_db: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            trim_db: -40.0,
        }
    }
}

/// Decode, resample, trim and analyse one clip from raw file bytes.
pub fn prepare_clip(entry: &ManifestEntry, bytes: &[u8], cfg: &PrepConfig) -> Result<Clip> {
    let wave = read_waveform(std::io::Cursor::new(bytes), cfg.mel.sample_rate)?;
    let wave = trim_silence(&wave, cfg.trim_db)?;
    let mel = mel_spectrogram(&wave, &cfg.mel)?;
    Ok(Clip {
        id: entry.clip_id.clone(),
        speaker_id: entry.speaker_id.clone(),
        transcript: entry.transcript.clone(),
        wave,
        mel,
    })
}

const MEL_MAGIC: &[u8; 4] = b"ELFM";
const MEL_VERSION: u32 = 1;

pub fn mel_to_bytes(mel: &Array2<f32>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MEL_MAGIC);
    w.u32(MEL_VERSION);
    w.u32(mel.nrows() as u32);
    w.u32(mel.ncols() as u32);
    w.f32s(
        mel.as_standard_layout()
            .as_slice()
            .expect("standard layout"),
    );
    w.seal()
}

pub fn mel_from_bytes(bytes: &[u8]) -> Result<Array2<f32>> {
    let mut r = ByteReader::new(unseal(bytes)?);
    r.expect_magic(MEL_MAGIC)?;
    let version = r.u32()?;
    if version != MEL_VERSION {
        return Err(Error::Version {
            expected: MEL_VERSION,
            found: version,
        });
    }
    let t = r.u32()? as usize;
    let m = r.u32()? as usize;
    let data = r.f32s(t * m)?;
    r.finish()?;
    Ok(Array2::from_shape_vec((t, m), data).expect("sized"))
}

fn write_float_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer =
            hound::WavWriter::new(&mut cursor, spec).map_err(|e| Error::Format(e.to_string()))?;
        for &s in &w.samples {
            writer
                .write_sample(s)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    write_atomic(path, &cursor.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub clip_id: String,
    pub speaker_id: String,
    pub transcript: String,
    pub n_samples: usize,
    pub n_frames: usize,
    pub source_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    pub processed: Vec<String>,
    pub cached: Vec<String>,
    pub failures: Vec<(String, String)>,
}

fn source_hash(bytes: &[u8], cfg: &PrepConfig) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.update(serde_json::to_vec(cfg).expect("serializable"));
    hex::encode(h.finalize())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join("index.jsonl");
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l.map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Format(e.to_string()))
        })
        .collect()
}

fn cache_paths(dir: &Path, clip_id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join("audio").join(format!("{clip_id}.wav")),
        dir.join("mel").join(format!("{clip_id}.mel")),
    )
}

/// Build or refresh the cache for every manifest entry. Failing clips are
/// reported and left out of the index; the others are still processed.
pub fn preprocess(
    manifest: &Manifest,
    base: &Path,
    cfg: &PrepConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<PreprocessReport> {
    manifest.validate()?;
    cfg.mel.validate()?;
    let previous: BTreeMap<String, IndexEntry> = read_index(out_dir)
        .map(|v| v.into_iter().map(|e| (e.clip_id.clone(), e)).collect())
        .unwrap_or_default();

    enum Outcome {
        Fresh(IndexEntry),
        Cached(IndexEntry),
        Failed(String),
    }
    let work = |entry: &ManifestEntry| -> Outcome {
        let run = || -> Result<Outcome> {
            let path = base.join(&entry.path);
            let bytes = read_file(&path)?;
            let hash = source_hash(&bytes, cfg);
            let (wav_path, mel_path) = cache_paths(out_dir, &entry.clip_id);
            if let Some(prev) = previous.get(&entry.clip_id) {
                if prev.source_hash == hash
                    && prev.speaker_id == entry.speaker_id
                    && prev.transcript == entry.transcript
                    && wav_path.exists()
                    && mel_path.exists()
                {
                    return Ok(Outcome::Cached(prev.clone()));
                }
            }
            let clip = prepare_clip(entry, &bytes, cfg)?;
            write_float_wav(&wav_path, &clip.wave)?;
            write_atomic(&mel_path, &mel_to_bytes(&clip.mel.frames))?;
            Ok(Outcome::Fresh(IndexEntry {
                clip_id: clip.id,
                speaker_id: clip.speaker_id,
                transcript: clip.transcript,
                n_samples: clip.wave.len(),
                n_frames: clip.mel.n_frames(),
                source_hash: hash,
            }))
        };
        run().unwrap_or_else(|e| Outcome::Failed(e.to_string()))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<Outcome> = pool.install(|| manifest.entries.par_iter().map(work).collect());

    let mut report = PreprocessReport::default();
    let mut index = Vec::new();
    for (entry, outcome) in manifest.entries.iter().zip(outcomes) {
        match outcome {
            Outcome::Fresh(ix) => {
                report.processed.push(entry.clip_id.clone());
                index.push(ix);
            }
            Outcome::Cached(ix) => {
                report.cached.push(entry.clip_id.clone());
                index.push(ix);
            }
            Outcome::Failed(msg) => report.failures.push((entry.clip_id.clone(), msg)),
        }
    }
    let mut buf = Vec::new();
    for ix in &index {
        writeln!(buf, "{}", serde_json::to_string(ix).expect("serializable"))
            .expect("write to vec");
    }
    write_atomic(&out_dir.join("index.jsonl"), &buf)?;
    let prep = toml::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&out_dir.join("prep.toml"), prep.as_bytes())?;
    Ok(report)
}

/// Load every indexed clip of a preprocessed directory, in index order.
pub fn load_dataset(dir: &Path, mel_cfg: &MelConfig) -> Result<Vec<Clip>> {
    let prep_path = dir.join("prep.toml");
    let prep_text = std::fs::read_to_string(&prep_path).map_err(|e| Error::io(&prep_path, e))?;
    let prep: PrepConfig = toml::from_str(&prep_text).map_err(|e| Error::Format(e.to_string()))?;
    if &prep.mel != mel_cfg {
        return Err(Error::Config(format!(
            "{} was preprocessed with different mel settings; rerun preprocess",
            dir.display()
        )));
    }
    read_index(dir)?
        .into_iter()
        .map(|ix| {
            let (wav_path, mel_path) = cache_paths(dir, &ix.clip_id);
            let wave = crate::audio::load_waveform(&wav_path, mel_cfg.sample_rate)?;
            let frames = mel_from_bytes(&read_file(&mel_path)?)?;
            if frames.nrows() != ix.n_frames || wave.len() != ix.n_samples {
                return Err(Error::Format(format!(
                    "cache entry `{}` is inconsistent",
                    ix.clip_id
                )));
            }
            Ok(Clip {
                id: ix.clip_id,
                speaker_id: ix.speaker_id,
                transcript: ix.transcript,
                wave,
                mel: MelSpectrogram {
                    frames,
                    config: mel_cfg.clone(),
                },
            })
        })
        .collect()
}

/// Clips grouped by speaker, each group in dataset order.
pub fn by_speaker(clips: &[Clip]) -> BTreeMap<String, Vec<&Clip>> {
    let mut out: BTreeMap<String, Vec<&Clip>> = BTreeMap::new();
    for c in clips {
        out.entry(c.speaker_id.clone()).or_default().push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_checked() {
        let e = |id: &str| ManifestEntry {
            clip_id: id.into(),
            speaker_id: "s1".into(),
            path: "a.wav".into(),
            transcript: "hi".into(),
        };
        assert!(Manifest::new(vec![e("a_1")]).is_ok());
        assert!(Manifest::new(vec![e("../x")]).is_err());
        assert!(Manifest::new(vec![e("a"), e("a")]).is_err());
    }

    #[test]
    fn mel_cache_round_trip() {
        let m = Array2::from_shape_fn((7, 3), |(i, j)| (i as f32).sin() - j as f32);
        let bytes = mel_to_bytes(&m);
        assert_eq!(mel_from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[10] ^= 4;
        assert!(matches!(mel_from_bytes(&bad), Err(Error::Checksum { .. })));
    }
}
