//! The byte-level recursive auto-encoder, the word-level sentence encoder
//! built from the same recursive group, and the sentence-pair classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NormMode, StepKey};
use crate::padding::{PaddedSequence, PaddingMode, BYTE_VOCAB};
use crate::tensor::{Float, Tensor};

mod autoencoder;
mod groups;
mod word;

pub use autoencoder::{AeOutput, Autoencoder};
pub use groups::{Decoder, Encoder, UpBlock};
pub use word::{ensemble_embed, NliHead, NliModel, NliOutput, WordConfig, NLI_CLASSES, WORD_K};

/// Architecture hyperparameters of the byte-level model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Convolution layers per group; even since residual blocks hold two.
    pub n_layers: usize,
    /// Channels.
    pub d: usize,
    /// Padded length is `2^big_k`.
    pub big_k: usize,
    /// Latent length is `2^r`.
    pub r: usize,
    pub vocab_size: usize,
    pub norm: NormMode,
    pub padding: PaddingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d: 256,
            big_k: 10,
            r: 2,
            vocab_size: BYTE_VOCAB,
            norm: NormMode::Batch,
            padding: PaddingMode::BalancedFixed,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers < 2 || self.n_layers % 2 != 0 {
            return bad(format!("n_layers must be even and at least 2, got {}", self.n_layers));
        }
        if self.d == 0 || self.vocab_size == 0 {
            return bad("d and vocab_size must be positive".into());
        }
        if self.r >= self.big_k {
            return bad(format!("r must be below K, got r={} K={}", self.r, self.big_k));
        }
        if self.big_k > 20 {
            return bad(format!("K={} is too large", self.big_k));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.d << self.r
    }

    /// Padded-length exponents the model can be run at.
    pub fn length_classes(&self) -> Vec<usize> {
        match self.padding {
            PaddingMode::RightNearest => (self.r..=self.big_k).collect(),
            _ => vec![self.big_k],
        }
    }

    /// Keys of groups that run once per forward pass.
    pub fn single_keys(&self) -> Vec<StepKey> {
        self.length_classes().into_iter().map(|k| StepKey::new(0, k)).collect()
    }

    /// Keys of the recursive groups: one per application and length class.
    pub fn recursive_keys(&self) -> Vec<StepKey> {
        self.length_classes()
            .into_iter()
            .flat_map(|k| (0..k - self.r).map(move |s| StepKey::new(s, k)))
            .collect()
    }

    /// Exact number of trainable scalars, from the architecture alone.
    pub fn param_count(&self) -> usize {
        let (d, half) = (self.d, self.n_layers / 2);
        let single = self.single_keys().len();
        let rec = self.recursive_keys().len();
        let norm = |channels: usize, keys: usize| match self.norm {
            NormMode::None => 0,
            _ => 2 * channels * keys,
        };
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
        let block = |keys: usize| 2 * conv(d, d, 3) + 2 * norm(d, keys);

        let embedding = self.vocab_size * d;
        let encoder = half * block(single) + half * block(rec);
        let up = conv(d, 2 * d, 3) + norm(2 * d, rec) + conv(d, d, 3) + norm(d, rec);
        let decoder = up + (half - 1) * block(rec) + half * block(single) + conv(d, self.vocab_size, 1);
        embedding + encoder + decoder
    }
}

/// Equal-length padded sequences stacked into one `[B, 2^k]` id matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// True at real-token slots.
    pub mask: Vec<bool>,
    pub size: usize,
    /// Every sequence has `2^big_k` slots.
    pub big_k: usize,
    pub positions: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(seqs: &[PaddedSequence]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut b = Batch {
            ids: Vec::with_capacity(seqs.len() * first.slots()),
            mask: Vec::with_capacity(seqs.len() * first.slots()),
            size: seqs.len(),
            big_k: first.big_k,
            positions: Vec::with_capacity(seqs.len()),
        };
        for (i, s) in seqs.iter().enumerate() {
            if s.big_k != first.big_k {
                return Err(Error::Data(format!(
                    "sequence {i} has {} slots, batch has {}",
                    s.slots(),
                    first.slots()
                )));
            }
            b.ids.extend_from_slice(&s.ids);
            b.mask.extend(s.real_mask());
            b.positions.push(s.positions.clone());
        }
        Ok(b)
    }

    pub fn slots(&self) -> usize {
        1 << self.big_k
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Argmax over the vocabulary axis of `[B, V, T]` logits, as `B·T` ids in
/// batch-major order. Ties go to the lower id.
pub fn argmax_ids<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    let (b, v, t) = (s[0], s[1], s[2]);
    let data = logits.data();
    let mut out = Vec::with_capacity(b * t);
    for bi in 0..b {
        let base = bi * v * t;
        for ti in 0..t {
            let mut best = 0;
            for vi in 1..v {
                if data[base + vi * t + ti] > data[base + best * t + ti] {
                    best = vi;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests;
