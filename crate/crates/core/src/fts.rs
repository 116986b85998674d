//! Feature-to-speech variant: text features only choose attention weights
//! over projected codebook vectors, and the weighted sum replaces the text
//! pathway as input to the prior and duration heads.

use candle_core::Tensor;
use ndarray::Array2;

use crate::checkpoint::ModelKind;
use crate::codebook::SpeakerCodebook;
use crate::error::{Error, Result};
use crate::nn::{array_from_tensor, softmax_last, Linear, Scope};
use crate::tts::{PhonemeSequence, PriorPath, Synthesis, SynthesisOptions, Tts};

/// Multi-head attention scores averaged over heads, applied to a single
/// value projection, so each output row is a convex combination of values.
#[derive(Debug, Clone)]
pub struct FtsAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    heads: usize,
    width: usize,
}

impl FtsAttention {
    pub fn new(vs: &Scope, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&vs.pp("q"), width, width)?,
            k: Linear::new(&vs.pp("k"), width, width)?,
            v: Linear::new(&vs.pp("v"), width, width)?,
            heads,
            width,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.width / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Head-averaged attention weights `(B, L, K)`.
    pub fn weights(&self, query: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let scale = 1.0 / ((self.width / self.heads) as f64).sqrt();
        let s = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .affine(scale, 0.0)?;
        Ok(softmax_last(&s)?.mean(1)?)
    }

    /// Projected value vectors `(B, K, d)`.
    pub fn values(&self, memory: &Tensor) -> Result<Tensor> {
        self.v.forward(memory)
    }

    /// `query` `(B, L, d)`, `memory` `(B, K, d)` -> `(B, L, d)`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor) -> Result<Tensor> {
        Ok(self.weights(query, memory)?.matmul(&self.values(memory)?)?)
    }
}

/// Output rows of the substituted prior input together with the weights and
/// values that produce them: `output = weights * values`.
#[derive(Debug, Clone)]
pub struct FtsDecomposition {
    pub output: Array2<f32>,
    pub weights: Array2<f32>,
    pub values: Array2<f32>,
}

fn attention(model: &Tts) -> Result<&FtsAttention> {
    match &model.prior_path {
        PriorPath::Codebook(a) => Ok(a),
        PriorPath::Fusion(_) => Err(Error::ModelKind {
            expected: ModelKind::Fts.to_string(),
            found: model.kind().to_string(),
        }),
    }
}

/// `L x d` features that feed the prior-statistics head.
pub fn fts_prior(model: &Tts, seq: &PhonemeSequence, cb: &SpeakerCodebook) -> Result<Array2<f32>> {
    Ok(fts_decompose(model, seq, cb)?.output)
}

pub fn fts_decompose(
    model: &Tts,
    seq: &PhonemeSequence,
    cb: &SpeakerCodebook,
) -> Result<FtsDecomposition> {
    let attn = attention(model)?;
    let (query, _) = model.pre_fusion_single(seq)?;
    let memory = model.encode_codebook(cb)?;
    let weights = attn.weights(&query, &memory)?;
    let values = attn.values(&memory)?;
    let output = weights.matmul(&values)?;
    Ok(FtsDecomposition {
        output: array_from_tensor(&output.squeeze(0)?)?,
        weights: array_from_tensor(&weights.squeeze(0)?)?,
        values: array_from_tensor(&values.squeeze(0)?)?,
    })
}

pub fn synthesize_fts(
    model: &Tts,
    seq: &PhonemeSequence,
    cb: &SpeakerCodebook,
    opts: &SynthesisOptions,
) -> Result<Synthesis> {
    attention(model)?;
    model.synthesize(seq, cb, opts)
}
