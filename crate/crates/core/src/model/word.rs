use serde::{Deserialize, Serialize};

use super::Encoder;
use crate::error::{Error, Result};
use crate::nn::{CalibCursor, Ctx, EmbeddingTable, ForwardMode, Linear, NormLayer, NormMode, StepKey};
use crate::padding::{pad_balanced, PaddedSequence, WordVocab};
use crate::tensor::{Float, ParamStore, Rng, Tape, Tensor, Var};

/// Sentences are truncated to and padded into `2^WORD_K` slots.
pub const WORD_K: usize = 6;
/// Output order of the classifier logits.
pub const NLI_CLASSES: [&str; 3] = ["entailment", "contradiction", "neutral"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordConfig {
    pub n_layers: usize,
    /// Width of the word vectors, and therefore of the sentence vector.
    pub d_w: usize,
    pub norm: NormMode,
    /// Hidden width of the classifier.
    pub hidden: usize,
}

impl WordConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.n_layers % 2 != 0 {
            return Err(Error::Config(format!("n_layers must be even and at least 2, got {}", self.n_layers)));
        }
        if self.d_w == 0 || self.hidden == 0 {
            return Err(Error::Config("d_w and hidden must be positive".into()));
        }
        Ok(())
    }

    fn single_keys() -> Vec<StepKey> {
        vec![StepKey::new(0, WORD_K)]
    }

    fn recursive_keys() -> Vec<StepKey> {
        (0..WORD_K).map(|s| StepKey::new(s, WORD_K)).collect()
    }

    /// Trainable scalars of encoder and classifier; the word table is frozen.
    pub fn param_count(&self) -> usize {
        let (d, h, half) = (self.d_w, self.hidden, self.n_layers / 2);
        let norm = |keys: usize| if self.norm == NormMode::None { 0 } else { 2 * d * keys };
        let block = |keys: usize| 2 * (d * d * 3 + d) + 2 * norm(keys);
        let encoder = half * block(1) + half * block(WORD_K);
        let head = (4 * d * h + h) + (h * h + h) + (h * 3 + 3);
        encoder + head
    }
}

/// Three fully connected layers over `[v_p; v_h; |v_p − v_h|; v_p ⊙ v_h]`.
#[derive(Debug, Clone)]
pub struct NliHead {
    pub layers: [Linear; 3],
}

impl NliHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        NliHead {
            layers: [
                Linear::new(store, "head.0", 4 * d, hidden, rng),
                Linear::new(store, "head.1", hidden, hidden, rng),
                Linear::new(store, "head.2", hidden, NLI_CLASSES.len(), rng),
            ],
        }
    }

    /// Pair features `[B, 4d]` from sentence vectors `[B, d]`.
    pub fn features<T: Float>(tape: &mut Tape<T>, vp: Var, vh: Var) -> Result<Var> {
        if tape.shape(vp) != tape.shape(vh) {
            return Err(Error::ShapeMismatch {
                op: "nli features",
                left: tape.shape(vp).to_vec(),
                right: tape.shape(vh).to_vec(),
            });
        }
        let axis = tape.shape(vp).len() - 1;
        let diff = tape.sub(vp, vh)?;
        let diff = tape.abs(diff)?;
        let prod = tape.mul(vp, vh)?;
        let a = tape.concat(vp, vh, axis)?;
        let b = tape.concat(diff, prod, axis)?;
        tape.concat(a, b, axis)
    }

    /// Class logits `[B, 3]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, vp: Var, vh: Var) -> Result<Var> {
        let mut h = Self::features(ctx.tape, vp, vh)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i + 1 < self.layers.len() {
                h = ctx.tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Word-level recursive encoder over a frozen word-vector table, with the
/// sentence-pair classifier used to train it.
#[derive(Debug, Clone)]
pub struct NliModel<T: Float = f32> {
    pub config: WordConfig,
    pub params: ParamStore<T>,
    pub vocab: WordVocab,
    pub words: EmbeddingTable,
    pub encoder: Encoder<T>,
    pub head: NliHead,
}

/// Result of classifying a batch of sentence pairs.
#[derive(Debug, Clone)]
pub struct NliOutput {
    pub logits: Var,
    pub loss: Var,
    pub predictions: Vec<usize>,
    pub correct: usize,
}

impl<T: Float> NliModel<T> {
    /// `vectors` is `[vocab.words().len(), d_w]`; zero rows for the
    /// out-of-vocabulary and PAD ids are appended and the table is frozen.
    pub fn new(mut config: WordConfig, vocab: WordVocab, vectors: Tensor<T>, rng: &mut Rng) -> Result<Self> {
        let (rows, d_w) = match *vectors.shape() {
            [r, d] => (r, d),
            ref s => return Err(Error::InvalidShape(s.to_vec())),
        };
        if rows != vocab.words().len() {
            return Err(Error::Data(format!("{} word vectors for {} words", rows, vocab.words().len())));
        }
        config.d_w = d_w;
        config.validate()?;
        let mut data = vectors.into_data();
        data.resize((rows + 2) * d_w, T::zero());
        let table = Tensor::from_vec(&[rows + 2, d_w], data)?;

        let mut params = ParamStore::new();
        let words = EmbeddingTable::frozen(&mut params, "words", table)?;
        let encoder = Encoder::new(
            &mut params,
            "word_encoder",
            config.n_layers,
            d_w,
            config.norm,
            &WordConfig::single_keys(),
            &WordConfig::recursive_keys(),
            rng,
        );
        let head = NliHead::new(&mut params, d_w, config.hidden, rng);
        Ok(NliModel { config, params, vocab, words, encoder, head })
    }

    /// Ids of the first `2^WORD_K` tokens, balanced into `2^WORD_K` slots.
    pub fn pad_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Result<PaddedSequence> {
        if tokens.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        let ids = self.vocab.encode(&tokens[..tokens.len().min(1 << WORD_K)]);
        pad_balanced(&ids, WORD_K, self.vocab.pad_id())
    }

    /// Encoder outputs `v`, `[B, d_w]`.
    pub fn sentence_vectors<S: AsRef<str>, W: AsRef<[S]>>(
        &mut self,
        tape: &mut Tape<T>,
        sentences: &[W],
        mode: ForwardMode,
    ) -> Result<Var> {
        self.sentence_vectors_with(tape, sentences, mode, None)
    }

    /// [`Self::sentence_vectors`] advancing a calibration cursor.
    pub fn sentence_vectors_with<S: AsRef<str>, W: AsRef<[S]>>(
        &mut self,
        tape: &mut Tape<T>,
        sentences: &[W],
        mode: ForwardMode,
        calib: Option<&mut CalibCursor>,
    ) -> Result<Var> {
        if sentences.is_empty() {
            return Err(Error::Data("no sentences".into()));
        }
        let mut ids = Vec::with_capacity(sentences.len() << WORD_K);
        for s in sentences {
            ids.extend(self.pad_sentence(s.as_ref())?.ids);
        }
        let mut ctx = Ctx::new(tape, &self.params, mode);
        ctx.calib = calib.as_deref().copied();
        let x = self.words.lookup(&mut ctx, &ids, Some(sentences.len()))?;
        let z = self.encoder.forward(&mut ctx, x, WORD_K, 0)?;
        if let (Some(c), Some(after)) = (calib, ctx.calib) {
            *c = after;
        }
        tape.reshape(z, &[sentences.len(), self.config.d_w])
    }

    /// Mean word vector `u`; out-of-vocabulary words add zero but still count.
    pub fn bow_embed<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        let d = self.config.d_w;
        let table = self.params.get(self.words.vectors).value.data();
        let mut sum = vec![T::zero(); d];
        for id in self.vocab.encode(tokens) {
            for (s, &v) in sum.iter_mut().zip(&table[id * d..(id + 1) * d]) {
                *s += v;
            }
        }
        let m = T::of(tokens.len() as f64);
        Tensor::from_vec(&[d], sum.into_iter().map(|s| s / m).collect())
    }

    /// Per-sentence `(v, u)` computed without recording gradients.
    pub fn embed_pairs<S: AsRef<str>, W: AsRef<[S]>>(
        &mut self,
        sentences: &[W],
        mode: ForwardMode,
    ) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut tape = Tape::new();
        let v = self.sentence_vectors(&mut tape, sentences, mode)?;
        let d = self.config.d_w;
        let vs = tape.value(v).data();
        sentences
            .iter()
            .enumerate()
            .map(|(i, s)| Ok((Tensor::from_vec(&[d], vs[i * d..(i + 1) * d].to_vec())?, self.bow_embed(s.as_ref())?)))
            .collect()
    }

    /// Classifies premise/hypothesis pairs and scores them against `labels`.
    pub fn forward<S: AsRef<str>, W: AsRef<[S]>>(
        &mut self,
        tape: &mut Tape<T>,
        premises: &[W],
        hypotheses: &[W],
        labels: &[usize],
        mode: ForwardMode,
    ) -> Result<NliOutput> {
        if premises.len() != hypotheses.len() || premises.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} premises, {} hypotheses, {} labels",
                premises.len(),
                hypotheses.len(),
                labels.len()
            )));
        }
        let vp = self.sentence_vectors(tape, premises, mode)?;
        let vh = self.sentence_vectors(tape, hypotheses, mode)?;
        let mut ctx = Ctx::new(tape, &self.params, mode);
        let logits = self.head.forward(&mut ctx, vp, vh)?;
        let loss = tape.softmax_xent(logits, labels, None)?;
        let lv = tape.value(logits).data();
        let predictions: Vec<usize> = lv
            .chunks(NLI_CLASSES.len())
            .map(|row| (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
            .collect();
        let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(NliOutput { logits, loss, predictions, correct })
    }

    pub fn norm_layers(&self) -> Vec<&NormLayer<T>> {
        self.encoder.norms()
    }

    pub fn norm_layers_mut(&mut self) -> Vec<&mut NormLayer<T>> {
        self.encoder.norms_mut()
    }
}

/// `x = v + u`.
pub fn ensemble_embed<T: Float>(v: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    if v.shape() != u.shape() {
        return Err(Error::ShapeMismatch { op: "ensemble_embed", left: v.shape().to_vec(), right: u.shape().to_vec() });
    }
    Tensor::from_vec(v.shape(), v.data().iter().zip(u.data()).map(|(&a, &b)| a + b).collect())
}
