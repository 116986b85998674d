//! Tokenization, the text encoder and codebook fusion.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    positional_encoding, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, Scope,
    TransformerLayer,
};

/// Symbol ids of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<u32>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::Input(format!(
                "symbol id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Text to symbol ids. A phonemizer can be plugged in by implementing this.
pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Result<PhonemeSequence>;
}

/// One symbol per character of a fixed inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharTokenizer {
    symbols: Vec<char>,
}

impl CharTokenizer {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config("empty symbol inventory".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("symbol {c:?} listed twice")));
            }
        }
        Ok(Self { symbols })
    }
}

impl Tokenizer for CharTokenizer {
    fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    fn encode(&self, text: &str) -> Result<PhonemeSequence> {
        let ids = text
            .chars()
            .map(|c| {
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|p| p as u32)
                    .ok_or_else(|| Error::Input(format!("symbol {c:?} not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        PhonemeSequence::new(ids, self.symbols.len())
    }
}

/// Padded `(B, L)` id tensor plus the `(B, 1, L)` mask.
pub fn batch_ids(
    seqs: &[&PhonemeSequence],
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = vec![0u32; seqs.len() * max_len];
    for (b, s) in seqs.iter().enumerate() {
        ids[b * max_len..b * max_len + s.len()].copy_from_slice(&s.ids);
    }
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let ids = Tensor::from_vec(ids, (seqs.len(), max_len), device)?;
    let mask = crate::nn::sequence_mask(&lengths, max_len, dtype, device)?;
    Ok((ids, mask, lengths))
}

/// `(B, 1, L)` mask -> attention mask `(B, 1, L, L)` and row mask `(B, L, 1)`.
pub fn attention_masks(mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let row = mask.transpose(1, 2)?;
    let attn = row.broadcast_mul(mask)?.unsqueeze(1)?;
    Ok((attn, row))
}

/// Embedding + sinusoidal positions + post-norm transformer layers.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    emb: Embedding,
    layers: Vec<TransformerLayer>,
    width: usize,
}

impl TextEncoder {
    pub fn new(
        vs: &Scope,
        vocab: usize,
        width: usize,
        layers: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(Self {
            emb: Embedding::new(&vs.pp("emb"), vocab, width)?,
            layers: (0..layers)
                .map(|i| TransformerLayer::new(&vs.pp(format!("layers.{i}")), width, heads, ffn))
                .collect::<Result<Vec<_>>>()?,
            width,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(B, L)` ids -> `(B, L, width)` scaled embeddings plus positions.
    pub fn embed(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (_, l) = ids.dims2()?;
        let x = (self.emb.forward(ids)? * (self.width as f64).sqrt())?;
        let pe = positional_encoding(l, self.width, x.dtype(), x.device())?;
        Ok(x.broadcast_add(&pe)?
            .broadcast_mul(&mask.transpose(1, 2)?)?)
    }

    /// Run layers `range` on `x`.
    pub fn run(&self, x: &Tensor, mask: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        let (attn, row) = attention_masks(mask)?;
        let mut x = x.clone();
        for layer in &self.layers[range] {
            x = layer.forward(&x, Some(&attn), Some(&row))?;
        }
        Ok(x)
    }
}

/// Codebook transformer: projects `K x H` codebook rows to the model width and
/// mixes them with position-free self-attention.
#[derive(Debug, Clone)]
pub struct CodebookEncoder {
    proj: Linear,
    layers: Vec<TransformerLayer>,
    latent_dim: usize,
}

impl CodebookEncoder {
    pub fn new(
        vs: &Scope,
        latent_dim: usize,
        width: usize,
        layers: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&vs.pp("proj"), latent_dim, width)?,
            layers: (0..layers)
                .map(|i| TransformerLayer::new(&vs.pp(format!("layers.{i}")), width, heads, ffn))
                .collect::<Result<Vec<_>>>()?,
            latent_dim,
        })
    }

    /// `(1, K, H)` -> `(1, K, width)`.
    pub fn forward(&self, codebook: &Tensor) -> Result<Tensor> {
        let h = codebook.dim(2)?;
        if h != self.latent_dim {
            return Err(Error::Config(format!(
                "codebook width {h} does not match latent dim {}",
                self.latent_dim
            )));
        }
        let mut x = self.proj.forward(codebook)?;
        for layer in &self.layers {
            x = layer.forward(&x, None, None)?;
        }
        Ok(x)
    }
}

/// Cross-attention block: text features query the encoded codebook.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl FusionBlock {
    pub fn new(vs: &Scope, width: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&vs.pp("attn"), width, heads)?,
            norm1: LayerNorm::new(&vs.pp("norm1"), width)?,
            ffn: FeedForward::new(&vs.pp("ffn"), width, ffn)?,
            norm2: LayerNorm::new(&vs.pp("norm2"), width)?,
        })
    }

    /// `h`: `(B, L, d)`, `memory`: `(B, K, d)`, `row`: `(B, L, 1)`. With
    /// `disabled` the attention output is replaced by zeros.
    pub fn forward(
        &self,
        h: &Tensor,
        memory: &Tensor,
        row: &Tensor,
        disabled: bool,
    ) -> Result<Tensor> {
        let a = self.attn.forward(h, memory, None)?;
        let a = if disabled { a.zeros_like()? } else { a };
        let x = self.norm1.forward(&(h + a)?)?;
        let x = self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)?;
        Ok(x.broadcast_mul(row)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_tokenizer() {
        let t = CharTokenizer::new("ab c").unwrap();
        assert_eq!(t.encode("c a").unwrap().ids, vec![3, 2, 0]);
        assert!(t.encode("").is_err());
        assert!(t.encode("z").is_err());
        assert!(CharTokenizer::new("aa").is_err());
    }
}
