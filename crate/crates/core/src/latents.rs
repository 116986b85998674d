//! Encoded latent frames: extraction per speaker, the `ELFL` dump format and
//! cosine similarity of plain vectors.
//!
//! `ELFL` layout (little-endian): magic `"ELFL"`, version `u32`, speaker id
//! (`u32` length + UTF-8), `H` `u32`, `N` `u64`, `N * H` row-major `f32`
//! mean payload, `N * H` row-major `f32` scale payload, CRC-32 of all
//! preceding bytes.

use std::path::Path;

use ndarray::Array2;

use crate::binfmt::{read_file, unseal, write_atomic, ByteReader, ByteWriter};
use crate::codebook::MuFrameSet;
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::sfen::Sfen;

pub const MAGIC: &[u8; 4] = b"ELFL";
pub const VERSION: u32 = 1;

/// Per-frame means and scales of one speaker, clips concatenated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub speaker_id: String,
    pub mu: Array2<f32>,
    pub sigma: Array2<f32>,
}

impl LatentDump {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.string(&self.speaker_id);
        w.u32(self.mu.ncols() as u32);
        w.u64(self.mu.nrows() as u64);
        for m in [&self.mu, &self.sigma] {
            let s = m.as_standard_layout();
            w.f32s(s.as_slice().expect("standard layout"));
        }
        w.seal()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(unseal(bytes)?);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let speaker_id = r.string()?;
        let h = r.u32()? as usize;
        let n =
            usize::try_from(r.u64()?).map_err(|_| Error::Format("frame count overflow".into()))?;
        let mut read = || -> Result<Array2<f32>> {
            Array2::from_shape_vec((n, h), r.f32s(n * h)?).map_err(|e| Error::Format(e.to_string()))
        };
        let mu = read()?;
        let sigma = read()?;
        r.finish()?;
        Ok(Self {
            speaker_id,
            mu,
            sigma,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Encode every clip of one speaker, in the given order.
pub fn encode_speaker(clips: &[&Clip], sfen: &Sfen) -> Result<LatentDump> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Input("no clips to encode".into()))?;
    let speaker_id = first.speaker_id.clone();
    if let Some(c) = clips.iter().find(|c| c.speaker_id != speaker_id) {
        return Err(Error::Input(format!(
            "clip `{}` belongs to `{}`, not `{speaker_id}`",
            c.id, c.speaker_id
        )));
    }
    let dists = clips
        .iter()
        .map(|c| sfen.encode(&c.mel))
        .collect::<Result<Vec<_>>>()?;
    let views_mu: Vec<_> = dists.iter().map(|d| d.mu.view()).collect();
    let views_sigma: Vec<_> = dists.iter().map(|d| d.sigma.view()).collect();
    let concat = |v: &[ndarray::ArrayView2<f32>]| {
        ndarray::concatenate(ndarray::Axis(0), v).map_err(|e| Error::Dimension(e.to_string()))
    };
    Ok(LatentDump {
        speaker_id,
        mu: concat(&views_mu)?,
        sigma: concat(&views_sigma)?,
    })
}

/// Means of every clip of one speaker, concatenated in the given order.
pub fn extract_mu_frames(clips: &[&Clip], sfen: &Sfen) -> Result<MuFrameSet> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Input("no clips to encode".into()))?;
    let per_clip = clips
        .iter()
        .map(|c| {
            if c.speaker_id != first.speaker_id {
                return Err(Error::Input(format!(
                    "clip `{}` belongs to `{}`, not `{}`",
                    c.id, c.speaker_id, first.speaker_id
                )));
            }
            Ok((c.id.clone(), sfen.encode(&c.mel)?.mu))
        })
        .collect::<Result<Vec<_>>>()?;
    MuFrameSet::from_clips(first.speaker_id.clone(), per_clip)
}

/// `a . b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vector lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Input("empty vectors".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    let norm = match (na * nb).sqrt() {
        n if n.is_finite() && n > 0.0 => n,
        _ => na.sqrt() * nb.sqrt(),
    };
    Ok((dot / norm).clamp(-1.0, 1.0))
}

/// Whitespace- or comma-separated numbers.
pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("not a number: `{s}`")))
        })
        .collect()
}
