//! Speaker blending: per-speaker fused features mixed by a convex
//! combination at the fusion layer.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codebook::{load_codebook, SpeakerCodebook};
use crate::error::{Error, Result};
use crate::tts::{PhonemeSequence, Synthesis, SynthesisOptions, Tts};

/// Proportions may be off by this much before renormalization.
pub const SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BlendEntry {
    pub codebook: SpeakerCodebook,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendSpec {
    pub entries: Vec<BlendEntry>,
}

impl BlendSpec {
    pub fn new(entries: Vec<(SpeakerCodebook, f64)>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(codebook, proportion)| BlendEntry {
                    codebook,
                    proportion,
                })
                .collect(),
        }
    }

    pub fn proportions(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.proportion).collect()
    }
}

/// Rejects empty specs, negative or non-finite proportions, sums further
/// than [`SUM_TOLERANCE`] from one and codebooks of differing width; rescales
/// the rest to sum to one.
pub fn validate_blend_spec(spec: &BlendSpec) -> Result<BlendSpec> {
    let first = spec
        .entries
        .first()
        .ok_or_else(|| Error::Input("blend needs at least one speaker".into()))?;
    let h = first.codebook.latent_dim();
    for e in &spec.entries {
        if !e.proportion.is_finite() || e.proportion < 0.0 {
            return Err(Error::Input(format!(
                "proportion {} for `{}` must be non-negative",
                e.proportion, e.codebook.speaker_id
            )));
        }
        if e.codebook.latent_dim() != h {
            return Err(Error::Dimension(format!(
                "codebook `{}` has width {}, expected {h}",
                e.codebook.speaker_id,
                e.codebook.latent_dim()
            )));
        }
    }
    let sum: f64 = spec.entries.iter().map(|e| e.proportion).sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Input(format!(
            "proportions sum to {sum}, expected 1"
        )));
    }
    let mut out = spec.clone();
    if sum != 1.0 {
        for e in &mut out.entries {
            e.proportion /= sum;
        }
    }
    Ok(out)
}

/// `sum_i p_i * fuse(h_prev, c_i)` for pre-fusion features `(1, L, d)`.
pub fn blend_fused_features(
    model: &Tts,
    h_prev: &Tensor,
    mask: &Tensor,
    spec: &BlendSpec,
) -> Result<Tensor> {
    let spec = validate_blend_spec(spec)?;
    let mut acc: Option<Tensor> = None;
    for e in &spec.entries {
        let memory = model.encode_codebook(&e.codebook)?;
        let h = model
            .fuse(h_prev, &memory, mask)?
            .affine(e.proportion, 0.0)?;
        acc = Some(match acc {
            Some(a) => (a + h)?,
            None => h,
        });
    }
    Ok(acc.expect("validated spec is non-empty"))
}

/// Blended text features `(1, L, d)` and mask of one utterance.
pub fn blend_text_features(
    model: &Tts,
    seq: &PhonemeSequence,
    spec: &BlendSpec,
) -> Result<(Tensor, Tensor)> {
    let (h_prev, mask) = model.pre_fusion_single(seq)?;
    let h = blend_fused_features(model, &h_prev, &mask, spec)?;
    Ok((model.post_fusion(&h, &mask)?, mask))
}

pub fn synthesize_blend(
    model: &Tts,
    seq: &PhonemeSequence,
    spec: &BlendSpec,
    opts: &SynthesisOptions,
) -> Result<Synthesis> {
    let (h, mask) = blend_text_features(model, seq, spec)?;
    model.synthesize_features(&h, &mask, opts)
}

/// One line of a blend spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendFileEntry {
    pub codebook_path: PathBuf,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendFile {
    pub speakers: Vec<BlendFileEntry>,
}

/// Parses `path:weight,path:weight`.
pub fn parse_blend_arg(arg: &str) -> Result<Vec<BlendFileEntry>> {
    arg.split(',')
        .map(|part| {
            let (path, w) = part.rsplit_once(':').ok_or_else(|| {
                Error::Input(format!("blend entry `{part}` is not `path:weight`"))
            })?;
            let proportion = w
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("bad blend weight `{w}`")))?;
            if path.trim().is_empty() {
                return Err(Error::Input(format!("blend entry `{part}` has no path")));
            }
            Ok(BlendFileEntry {
                codebook_path: PathBuf::from(path.trim()),
                proportion,
            })
        })
        .collect()
}

pub fn read_blend_file(path: &Path) -> Result<Vec<BlendFileEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: BlendFile = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    Ok(f.speakers)
}

/// Loads the codebooks and validates the resulting spec.
pub fn load_blend_spec(entries: &[BlendFileEntry], base: &Path) -> Result<BlendSpec> {
    let pairs = entries
        .iter()
        .map(|e| Ok((load_codebook(&base.join(&e.codebook_path))?, e.proportion)))
        .collect::<Result<Vec<_>>>()?;
    validate_blend_spec(&BlendSpec::new(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_inline_spec() {
        let e = parse_blend_arg("a.elfc:0.8,dir/b.elfc:0.2").unwrap();
        assert_eq!(e[1].codebook_path, PathBuf::from("dir/b.elfc"));
        assert_eq!(e[0].proportion, 0.8);
        assert!(parse_blend_arg("a.elfc").is_err());
        assert!(parse_blend_arg("a.elfc:x").is_err());
    }
}
