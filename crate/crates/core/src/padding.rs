//! Tokenization and the layouts that place a sequence into `2^K` slots.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte vocabulary: ids 0–255 are raw bytes, followed by two specials.
pub const PAD: usize = 256;
pub const EOS: usize = 257;
pub const BYTE_VOCAB: usize = 258;

/// Characters split off the edges of a word by [`tokenize_words`].
const EDGE_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')', '-'];

/// UTF-8 bytes of `text` followed by [`EOS`].
pub fn tokenize_bytes(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).chain(std::iter::once(EOS)).collect()
}

/// Lowercases, splits on whitespace and breaks leading/trailing punctuation
/// into one token per mark. Punctuation inside a word is kept.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let core = word.trim_start_matches(EDGE_PUNCT);
        let lead = &word[..word.len() - core.len()];
        let mid = core.trim_end_matches(EDGE_PUNCT);
        let trail = &core[mid.len()..];
        out.extend(lead.chars().map(String::from));
        if !mid.is_empty() {
            out.push(mid.to_string());
        }
        out.extend(trail.chars().map(String::from));
    }
    out
}

/// Smallest `k` with `2^k >= len`.
pub fn nearest_pow2(len: usize) -> Result<usize> {
    if len == 0 {
        return Err(Error::InvalidArgument("nearest_pow2 of an empty sequence".into()));
    }
    Ok(len.next_power_of_two().trailing_zeros() as usize)
}

/// How a sequence is laid out in its slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// `2^K` slots, token `i` at slot `i·2^(K−k)`.
    BalancedFixed,
    /// `2^K` slots, tokens first.
    RightFixed,
    /// `2^k` slots for the nearest power `k`, tokens first.
    RightNearest,
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced_fixed" => Ok(PaddingMode::BalancedFixed),
            "right_fixed" => Ok(PaddingMode::RightFixed),
            "right_nearest" => Ok(PaddingMode::RightNearest),
            _ => Err(Error::Config(format!(
                "unknown padding mode {s:?} (balanced_fixed|right_fixed|right_nearest)"
            ))),
        }
    }
}

impl std::fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PaddingMode::BalancedFixed => "balanced_fixed",
            PaddingMode::RightFixed => "right_fixed",
            PaddingMode::RightNearest => "right_nearest",
        })
    }
}

/// Token ids spread over a power-of-two number of slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSequence {
    pub ids: Vec<usize>,
    /// Slot of each real token, strictly increasing.
    pub positions: Vec<usize>,
    pub original_length: usize,
    /// `ids.len() == 2^big_k`.
    pub big_k: usize,
    /// Nearest-power exponent of `original_length`.
    pub k: usize,
    pub pad_id: usize,
}

impl PaddedSequence {
    pub fn slots(&self) -> usize {
        self.ids.len()
    }

    /// Per-slot flag, true at real tokens.
    pub fn real_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.ids.len()];
        for &p in &self.positions {
            m[p] = true;
        }
        m
    }
}

fn check_len(len: usize, big_k: usize) -> Result<usize> {
    let k = nearest_pow2(len)?;
    if k > big_k {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {len} does not fit into 2^{big_k} = {} slots",
            1usize << big_k
        )));
    }
    Ok(k)
}

fn place(ids: &[usize], big_k: usize, k: usize, stride: usize, pad_id: usize) -> PaddedSequence {
    let mut slots = vec![pad_id; 1 << big_k];
    let positions: Vec<usize> = (0..ids.len()).map(|i| i * stride).collect();
    for (&p, &id) in positions.iter().zip(ids) {
        slots[p] = id;
    }
    PaddedSequence { ids: slots, positions, original_length: ids.len(), big_k, k, pad_id }
}

/// Places token `i` at slot `i·2^(K−k)` where `k = nearest_pow2(L)`.
pub fn pad_balanced(ids: &[usize], big_k: usize, pad_id: usize) -> Result<PaddedSequence> {
    let k = check_len(ids.len(), big_k)?;
    Ok(place(ids, big_k, k, 1 << (big_k - k), pad_id))
}

/// Tokens in the first slots; `2^K` slots, or `2^k` when `big_k` is `None`.
pub fn pad_right(ids: &[usize], big_k: Option<usize>, pad_id: usize) -> Result<PaddedSequence> {
    let k = nearest_pow2(ids.len())?;
    let total = match big_k {
        Some(big_k) => {
            check_len(ids.len(), big_k)?;
            big_k
        }
        None => k,
    };
    Ok(place(ids, total, k, 1, pad_id))
}

/// Dispatches on `mode`. `big_k` is ignored by [`PaddingMode::RightNearest`]
/// except as an upper bound.
pub fn pad(ids: &[usize], big_k: usize, mode: PaddingMode, pad_id: usize) -> Result<PaddedSequence> {
    match mode {
        PaddingMode::BalancedFixed => pad_balanced(ids, big_k, pad_id),
        PaddingMode::RightFixed => pad_right(ids, Some(big_k), pad_id),
        PaddingMode::RightNearest => {
            check_len(ids.len(), big_k)?;
            pad_right(ids, None, pad_id)
        }
    }
}

/// Real tokens in their original order, after validating the layout.
pub fn unpad(p: &PaddedSequence) -> Result<Vec<usize>> {
    let corrupt = |why: &str| Err(Error::Data(format!("corrupted padded sequence: {why}")));
    if p.positions.is_empty() {
        return corrupt("no real tokens");
    }
    if p.positions.len() != p.original_length {
        return corrupt("position count differs from original length");
    }
    if p.ids.len() != 1 << p.big_k {
        return corrupt("slot count is not 2^K");
    }
    if p.positions.windows(2).any(|w| w[0] >= w[1]) {
        return corrupt("positions not strictly increasing");
    }
    if p.positions.last().is_some_and(|&last| last >= p.ids.len()) {
        return corrupt("position beyond the last slot");
    }
    let mask = p.real_mask();
    for (i, &id) in p.ids.iter().enumerate() {
        if mask[i] == (id == p.pad_id) {
            return corrupt(if mask[i] { "PAD at a real position" } else { "token in a pad slot" });
        }
    }
    Ok(p.positions.iter().map(|&i| p.ids[i]).collect())
}

/// Predicted ids at the real slots, with a final [`EOS`] removed.
pub fn decode_ids(argmax: &[usize], positions: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = positions.iter().filter_map(|&p| argmax.get(p).copied()).collect();
    if out.last() == Some(&EOS) {
        out.pop();
    }
    out
}

/// Display decoding: text up to the first predicted [`EOS`]. Predicted PAD
/// ids are dropped and invalid UTF-8 is shown with replacement characters.
pub fn decode_output(argmax: &[usize], positions: &[usize]) -> String {
    let bytes: Vec<u8> = positions
        .iter()
        .filter_map(|&p| argmax.get(p).copied())
        .take_while(|&id| id != EOS)
        .filter_map(|id| u8::try_from(id).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Word list of an embedding table plus two extra ids: an out-of-vocabulary
/// id and a PAD id, both mapped to frozen zero vectors.
#[derive(Debug, Clone, Default)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    /// First occurrence of a duplicated word wins.
    pub fn new(words: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            index.entry(w.clone()).or_insert(i);
        }
        WordVocab { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn oov_id(&self) -> usize {
        self.words.len()
    }

    pub fn pad_id(&self) -> usize {
        self.words.len() + 1
    }

    /// Rows in the embedding table including the OOV and PAD rows.
    pub fn size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.oov_id())
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}
