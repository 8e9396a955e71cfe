//! Word vectors, quote indexing and cosine nearest-neighbor response
//! selection.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ensemble_embed, NliModel};
use crate::nn::ForwardMode;
use crate::padding::{tokenize_words, WordVocab};
use crate::tensor::Tensor;

/// Pre-trained word vectors in the plain-text GloVe layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GloveTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    /// `[words.len(), dim]`, row-major.
    vectors: Vec<f32>,
    dim: usize,
    /// Lines skipped because a field was not a number or no values followed the word.
    pub malformed: usize,
    /// Repeated words; the first occurrence is kept.
    pub duplicates: usize,
}

impl GloveTable {
    pub fn parse(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut table = GloveTable {
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            dim: 0,
            malformed: 0,
            duplicates: 0,
        };
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values: std::result::Result<Vec<f32>, _> = fields.map(str::parse::<f32>).collect();
            let values = match values {
                Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => v,
                _ => {
                    table.malformed += 1;
                    continue;
                }
            };
            if table.dim == 0 {
                table.dim = values.len();
            } else if values.len() != table.dim {
                return Err(Error::Data(format!(
                    "{source}: line {} has {} values, expected {}",
                    lineno + 1,
                    values.len(),
                    table.dim
                )));
            }
            if table.index.contains_key(word) {
                table.duplicates += 1;
                continue;
            }
            table.index.insert(word.to_string(), table.words.len());
            table.words.push(word.to_string());
            table.vectors.extend(values);
        }
        if table.words.is_empty() {
            return Err(Error::Data(format!("{source}: no word vectors")));
        }
        if table.malformed > 0 {
            log::warn!("{source}: skipped {} malformed lines", table.malformed);
        }
        if table.duplicates > 0 {
            log::warn!("{source}: ignored {} repeated words", table.duplicates);
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.index.get(word).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn vocab(&self) -> WordVocab {
        WordVocab::new(self.words.clone())
    }

    /// All vectors as a `[len, dim]` tensor.
    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.words.len(), self.dim], self.vectors.clone()).expect("rows match words")
    }

    /// Mean vector of `tokens`; unknown words count as zero vectors.
    pub fn bow(&self, tokens: &[String]) -> Vec<f32> {
        let mut sum = vec![0.0f32; self.dim];
        for v in tokens.iter().filter_map(|t| self.get(t)) {
            sum.iter_mut().zip(v).for_each(|(s, &x)| *s += x);
        }
        let n = tokens.len().max(1) as f32;
        sum.iter_mut().for_each(|s| *s /= n);
        sum
    }
}

pub fn load_glove(path: &Path) -> Result<GloveTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    GloveTable::parse(std::io::BufReader::new(file), &path.display().to_string())
}

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab, aa.sqrt(), bb.sqrt())
}

fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// `a·b / (|a||b|)`, clamped to `[−1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "cosine", left: vec![a.len()], right: vec![b.len()] });
    }
    let (ab, na, nb) = dot_norms(a, b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((ab / (na * nb)).clamp(-1.0, 1.0))
}

/// Maps sentences to fixed-size vectors.
pub trait Embedder {
    fn embed(&mut self, sentences: &[String]) -> Result<Vec<Vec<f32>>>;
}

impl<F: FnMut(&[String]) -> Result<Vec<Vec<f32>>>> Embedder for F {
    fn embed(&mut self, sentences: &[String]) -> Result<Vec<Vec<f32>>> {
        self(sentences)
    }
}

impl Embedder for GloveTable {
    fn embed(&mut self, sentences: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(sentences.iter().map(|s| self.bow(&tokenize_words(s))).collect())
    }
}

/// Which sentence representation a trained word-level model provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Mean word vector `u`.
    Bow,
    /// Encoder output `v`.
    Encoder,
    /// `v + u`.
    Ensemble,
}

impl FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bow" => Ok(EmbedderKind::Bow),
            "encoder" => Ok(EmbedderKind::Encoder),
            "ensemble" => Ok(EmbedderKind::Ensemble),
            _ => Err(Error::Config(format!("unknown embedder {s:?} (expected bow, encoder or ensemble)"))),
        }
    }
}

impl fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedderKind::Bow => "bow",
            EmbedderKind::Encoder => "encoder",
            EmbedderKind::Ensemble => "ensemble",
        })
    }
}

/// Sentence embeddings from a word-level model in inference mode. Sentences
/// without any word embed as the zero vector.
pub struct ModelEmbedder<'a> {
    pub model: &'a mut NliModel<f32>,
    pub kind: EmbedderKind,
    pub batch_size: usize,
}

impl Embedder for ModelEmbedder<'_> {
    fn embed(&mut self, sentences: &[String]) -> Result<Vec<Vec<f32>>> {
        let tokens: Vec<Vec<String>> = sentences.iter().map(|s| tokenize_words(s)).collect();
        let mut out = vec![vec![0.0; self.model.config.d_w]; sentences.len()];
        let nonempty: Vec<usize> = (0..tokens.len()).filter(|&i| !tokens[i].is_empty()).collect();
        if self.kind == EmbedderKind::Bow {
            for &i in &nonempty {
                out[i] = self.model.bow_embed(&tokens[i])?.into_data();
            }
            return Ok(out);
        }
        for chunk in nonempty.chunks(self.batch_size.max(1)) {
            let batch: Vec<&[String]> = chunk.iter().map(|&i| tokens[i].as_slice()).collect();
            for (&i, (v, u)) in chunk.iter().zip(self.model.embed_pairs(&batch, ForwardMode::Infer)?) {
                out[i] = match self.kind {
                    EmbedderKind::Encoder => v.into_data(),
                    _ => ensemble_embed(&v, &u)?.into_data(),
                };
            }
        }
        Ok(out)
    }
}

/// One retrievable quote, with the utterance it answered when known.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub input: Option<String>,
    pub response: String,
}

/// One quote per line, or `input<TAB>response` per line when `paired`.
/// Blank lines are ignored.
pub fn parse_corpus(text: &str, paired: bool, source: &str) -> Result<Vec<CorpusEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = if paired {
            let (input, response) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{source}: line {} has no tab separator", lineno + 1)))?;
            CorpusEntry { input: Some(input.to_string()), response: response.to_string() }
        } else {
            CorpusEntry { input: None, response: line.to_string() }
        };
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{source}: empty corpus")));
    }
    Ok(entries)
}

pub fn load_corpus(path: &Path, paired: bool) -> Result<Vec<CorpusEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, paired, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub vector: Vec<f32>,
    pub norm: f64,
}

impl Embedded {
    fn new(vector: Vec<f32>) -> Option<Self> {
        let norm = norm(&vector);
        (norm > 0.0 && norm.is_finite()).then_some(Embedded { vector, norm })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub input: Option<String>,
    pub response: String,
    pub response_embedding: Embedded,
    pub input_embedding: Option<Embedded>,
}

/// Which side of each corpus entry the query is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    MatchResponse,
    MatchInput,
}

impl FromStr for MatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match_response" => Ok(MatchStrategy::MatchResponse),
            "match_input" => Ok(MatchStrategy::MatchInput),
            _ => Err(Error::Config(format!("unknown strategy {s:?} (expected match_response or match_input)"))),
        }
    }
}

impl fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchStrategy::MatchResponse => "match_response",
            MatchStrategy::MatchInput => "match_input",
        })
    }
}

/// Embedded corpus, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct QuoteIndex {
    pub entries: Vec<IndexEntry>,
    /// Corpus entries left out because an embedding was the zero vector.
    pub dropped: usize,
    dim: usize,
}

/// One search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub entry: usize,
    pub similarity: f64,
}

impl QuoteIndex {
    pub fn build(corpus: &[CorpusEntry], embedder: &mut dyn Embedder) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        let responses: Vec<String> = corpus.iter().map(|e| e.response.clone()).collect();
        let resp_vecs = embedder.embed(&responses)?;
        let inputs: Vec<String> = corpus.iter().filter_map(|e| e.input.clone()).collect();
        let mut input_vecs = embedder.embed(&inputs)?.into_iter();
        if resp_vecs.len() != corpus.len() {
            return Err(Error::Data(format!("embedder returned {} vectors for {} sentences", resp_vecs.len(), corpus.len())));
        }
        let dim = resp_vecs[0].len();
        let (mut entries, mut dropped) = (Vec::with_capacity(corpus.len()), 0);
        for (entry, rv) in corpus.iter().zip(resp_vecs) {
            let iv = entry.input.as_ref().map(|_| input_vecs.next().unwrap_or_default());
            if rv.len() != dim || iv.as_ref().is_some_and(|v| v.len() != dim) {
                return Err(Error::Data("embedder returned vectors of different sizes".into()));
            }
            let response_embedding = Embedded::new(rv);
            let input_embedding = iv.map(Embedded::new);
            match (response_embedding, input_embedding) {
                (Some(r), None) => entries.push(IndexEntry {
                    input: None,
                    response: entry.response.clone(),
                    response_embedding: r,
                    input_embedding: None,
                }),
                (Some(r), Some(Some(i))) => entries.push(IndexEntry {
                    input: entry.input.clone(),
                    response: entry.response.clone(),
                    response_embedding: r,
                    input_embedding: Some(i),
                }),
                _ => {
                    log::warn!("dropping quote with zero embedding: {:?}", entry.response);
                    dropped += 1;
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("all {dropped} corpus entries have zero embeddings")));
        }
        Ok(QuoteIndex { entries, dropped, dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Up to `k` entries by descending cosine similarity, ties to the lower
    /// entry index.
    pub fn knn(&self, query: &[f32], k: usize, strategy: MatchStrategy) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch { op: "knn", left: vec![query.len()], right: vec![self.dim] });
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::InvalidArgument("query embeds to the zero vector".into()));
        }
        let mut hits = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let emb = match strategy {
                MatchStrategy::MatchResponse => &e.response_embedding,
                MatchStrategy::MatchInput => e.input_embedding.as_ref().ok_or_else(|| {
                    Error::Config("match_input needs a paired corpus (input<TAB>response)".into())
                })?,
            };
            let dot: f64 = emb.vector.iter().zip(query).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            hits.push(Hit { entry: i, similarity: (dot / (emb.norm * qn)).clamp(-1.0, 1.0) });
        }
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.entry.cmp(&b.entry)));
        hits.truncate(k);
        Ok(hits)
    }

    /// The best response to `query` with its similarity.
    pub fn respond(&self, query: &str, embedder: &mut dyn Embedder, strategy: MatchStrategy) -> Result<(&str, f64)> {
        let q = embedder.embed(&[query.to_string()])?.pop().unwrap_or_default();
        let hit = self.knn(&q, 1, strategy)?[0];
        Ok((&self.entries[hit.entry].response, hit.similarity))
    }
}
