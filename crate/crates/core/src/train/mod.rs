//! Optimizer, samplers, batching, the training loop, batch-norm
//! calibration and evaluation by length.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Autoencoder, Batch, ModelConfig, NliModel};
use crate::nn::{CalibCursor, ForwardMode, NormMode};
use crate::padding::{nearest_pow2, pad, tokenize_bytes, PaddingMode, PAD};
use crate::tensor::{Float, ParamStore, Rng, Tape, Tensor};

mod nli;

pub use nli::{train_nli_epoch, NliExample};

/// The 62 symbols random strings are drawn from.
pub const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_after_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            momentum: 0.5,
            clip_norm: Some(1.0),
            batch_size: 32,
            epochs: 10,
            samples_per_epoch: 20_000,
            lr_decay_factor: 0.1,
            lr_decay_after_epoch: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, norm: NormMode) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.batch_size == 0 || (norm == NormMode::Batch && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch_size {} is too small (batch normalization needs at least 2)",
                self.batch_size
            )));
        }
        if self.samples_per_epoch == 0 {
            return Err(Error::Config("samples_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: `lr · factor^max(0, epoch − decay_after)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = epoch.saturating_sub(cfg.lr_decay_after_epoch);
    cfg.lr * cfg.lr_decay_factor.powi(decays as i32)
}

/// Per-parameter velocity of classic momentum SGD.
#[derive(Debug, Clone)]
pub struct Sgd<T: Float = f32> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Sgd { velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect() }
    }

    /// `v ← μ·v + g; θ ← θ − lr·v`, then zeroes the gradients. Frozen
    /// parameters are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, momentum: f64) {
        let (lr, mu) = (T::of(lr), T::of(momentum));
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if !p.frozen {
                let (theta, grad, vel) = (p.value.data_mut(), p.grad.data(), v.data_mut());
                for i in 0..theta.len() {
                    vel[i] = mu * vel[i] + grad[i];
                    theta[i] -= lr * vel[i];
                }
            }
            p.grad.fill_zero();
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `c`. Returns the
/// factor applied, 1.0 when nothing was clipped.
pub fn clip_global_norm<T: Float>(store: &mut ParamStore<T>, c: f64) -> f64 {
    let norm = store.trainable().map(|(_, p)| p.grad.sq_norm()).sum::<f64>().sqrt();
    if norm <= c || norm == 0.0 {
        return 1.0;
    }
    let scale = c / norm;
    let s = T::of(scale);
    for p in store.iter_mut().filter(|p| !p.frozen) {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
    }
    scale
}

/// Random string over [`ALPHABET`] with a uniform length in `lo..=hi`.
pub fn sample_random_string(rng: &mut Rng, lo: usize, hi: usize) -> Result<String> {
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("invalid length range {lo}..={hi}")));
    }
    let len = rng.range_inclusive(lo, hi);
    Ok((0..len).map(|_| char::from(ALPHABET[rng.below(ALPHABET.len())])).collect())
}

/// Source of training texts.
#[derive(Debug, Clone)]
pub enum Sampler {
    /// Random strings whose tokenized length (end marker included) is
    /// uniform in `min_len..=max_len`.
    Random { min_len: usize, max_len: usize },
    /// Lines drawn uniformly with replacement.
    Corpus(Vec<String>),
}

impl Sampler {
    pub fn random(min_len: usize, max_len: usize) -> Result<Self> {
        if min_len < 2 || min_len > max_len {
            return Err(Error::InvalidArgument(format!(
                "random sampler needs 2 <= min_len <= max_len, got {min_len}..={max_len}"
            )));
        }
        Ok(Sampler::Random { min_len, max_len })
    }

    pub fn corpus(texts: Vec<String>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Data("empty training corpus".into()));
        }
        Ok(Sampler::Corpus(texts))
    }

    pub fn sample(&self, rng: &mut Rng) -> String {
        match self {
            Sampler::Random { min_len, max_len } => {
                sample_random_string(rng, min_len - 1, max_len - 1).expect("range checked on construction")
            }
            Sampler::Corpus(texts) => texts[rng.below(texts.len())].clone(),
        }
    }
}

/// Tokenizes and pads `texts` per the model's padding mode.
///
/// In the legacy nearest-power mode every text must share one padded length,
/// which is raised to at least `2^r`.
pub fn make_batch<S: AsRef<str>>(texts: &[S], config: &ModelConfig) -> Result<Batch> {
    if texts.is_empty() {
        return Err(Error::Data("cannot batch an empty list of texts".into()));
    }
    let limit = 1usize << config.big_k;
    let mut seqs = Vec::with_capacity(texts.len());
    for (i, t) in texts.iter().enumerate() {
        let ids = tokenize_bytes(t.as_ref());
        if ids.len() > limit {
            return Err(Error::Data(format!(
                "text {i} has {} tokens with the end marker, more than the {limit} slots",
                ids.len()
            )));
        }
        let seq = match config.padding {
            PaddingMode::RightNearest => {
                let k = nearest_pow2(ids.len())?.max(config.r);
                pad(&ids, k, PaddingMode::RightFixed, PAD)?
            }
            mode => pad(&ids, config.big_k, mode, PAD)?,
        };
        if let Some(first) = seqs.first() {
            let first: &crate::padding::PaddedSequence = first;
            if first.big_k != seq.big_k {
                return Err(Error::Data(format!(
                    "text {i} pads to {} slots but text 0 pads to {}; nearest-power padding needs equal lengths",
                    seq.slots(),
                    first.slots()
                )));
            }
        }
        seqs.push(seq);
    }
    Batch::new(&seqs)
}

/// Texts grouped into batches of at most `batch_size` that share a padded
/// length, preserving order within each group.
pub fn batches_by_length<S: AsRef<str>>(texts: &[S], config: &ModelConfig, batch_size: usize) -> Result<Vec<(Vec<usize>, Batch)>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, t) in texts.iter().enumerate() {
        let len = t.as_ref().len() + 1;
        let key = match config.padding {
            PaddingMode::RightNearest => nearest_pow2(len)?.max(config.r),
            _ => config.big_k,
        };
        groups.entry(key).or_default().push(i);
    }
    let mut out = Vec::new();
    for idx in groups.into_values() {
        for chunk in idx.chunks(batch_size.max(1)) {
            let sel: Vec<&str> = chunk.iter().map(|&i| texts[i].as_ref()).collect();
            out.push((chunk.to_vec(), make_batch(&sel, config)?));
        }
    }
    Ok(out)
}

/// Summary of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub byte_error: f64,
    pub lr: f64,
    pub clip_events: usize,
    pub steps: usize,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,loss,byte_error,lr,clip_events";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.loss, self.byte_error, self.lr, self.clip_events)
    }
}

/// Batch sizes covering `total` samples; a single leftover sample is folded
/// into the last batch so batch normalization never sees a batch of one.
fn batch_sizes(total: usize, batch_size: usize) -> Vec<usize> {
    let mut sizes = vec![batch_size; total / batch_size];
    match total % batch_size {
        0 => {}
        1 if !sizes.is_empty() => *sizes.last_mut().expect("non-empty") += 1,
        rest => sizes.push(rest),
    }
    sizes
}

/// Forward, backward, clip and step on one batch. Returns (loss, byte error,
/// clipped).
pub fn train_step<T: Float>(
    model: &mut Autoencoder<T>,
    sgd: &mut Sgd<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(f64, f64, bool)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, ForwardMode::Train, None)?;
    let loss = tape.value(out.loss).item().to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    tape.backward(out.loss, &mut model.params)?;
    let clipped = cfg.clip_norm.is_some_and(|c| clip_global_norm(&mut model.params, c) < 1.0);
    sgd.step(&mut model.params, lr, cfg.momentum);
    Ok((loss, out.byte_error(), clipped))
}

/// Consumes `samples_per_epoch` samples, one optimizer step per batch.
///
/// In the legacy nearest-power mode a sampled batch is split by padded
/// length and each part gets its own step; parts of a single sample are
/// skipped under batch normalization.
pub fn train_epoch<T: Float>(
    model: &mut Autoencoder<T>,
    sgd: &mut Sgd<T>,
    sampler: &Sampler,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    cfg.validate(model.config.norm)?;
    let lr = lr_at_epoch(cfg, epoch);
    let (mut loss_sum, mut err_sum, mut clips, mut steps) = (0.0, 0.0, 0, 0);
    for size in batch_sizes(cfg.samples_per_epoch, cfg.batch_size) {
        let texts: Vec<String> = (0..size).map(|_| sampler.sample(rng)).collect();
        let parts = match model.config.padding {
            PaddingMode::RightNearest => batches_by_length(&texts, &model.config, size)?,
            _ => vec![((0..size).collect(), make_batch(&texts, &model.config)?)],
        };
        for (_, batch) in parts {
            if batch.size < 2 && model.config.norm == NormMode::Batch {
                continue;
            }
            let (loss, err, clipped) = train_step(model, sgd, &batch, cfg, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch}, step {steps}: {what}")),
                other => other,
            })?;
            loss_sum += loss;
            err_sum += err;
            clips += usize::from(clipped);
            steps += 1;
        }
    }
    let n = steps.max(1) as f64;
    Ok(EpochStats { epoch, loss: loss_sum / n, byte_error: err_sum / n, lr, clip_events: clips, steps })
}

/// Recomputes every batch-norm running statistic as the exact population
/// statistic of its input over `batches`.
///
/// Layers are calibrated one at a time in execution order, so each layer's
/// statistics are measured on inputs produced with the already calibrated
/// statistics of the layers before it. Infer-mode outputs on the same data
/// then match train-mode outputs computed over all of it at once.
pub fn calibrate_bn<T: Float>(model: &mut Autoencoder<T>, batches: &[Batch]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::Data("cannot calibrate on an empty corpus".into()));
    }
    if model.config.norm != NormMode::Batch {
        return Ok(());
    }
    let mut target = 0;
    loop {
        let mut reached = false;
        for b in batches {
            let mut tape = Tape::new();
            let mut cursor = CalibCursor { target, visited: 0 };
            model.forward(&mut tape, b, ForwardMode::Infer, Some(&mut cursor))?;
            reached |= cursor.visited > target;
        }
        if !reached {
            return Ok(());
        }
        for layer in model.norm_layers_mut() {
            layer.finish_calibration();
        }
        target += 1;
    }
}

/// Byte error of held-out texts grouped by tokenized length (end marker
/// included).
#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucketReport {
    /// `(lo, hi, n, mean byte error)`; the error is `None` for empty buckets.
    pub buckets: Vec<(usize, usize, usize, Option<f64>)>,
}

impl LengthBucketReport {
    pub const CSV_HEADER: &'static str = "lo,hi,n,error";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for &(lo, hi, n, err) in &self.buckets {
            let err = err.map(|e| e.to_string()).unwrap_or_default();
            writeln!(s, "{lo},{hi},{n},{err}").expect("writing to a String");
        }
        s
    }

    /// Byte accuracy pooled over every bucket whose range lies in `lo..=hi`.
    pub fn accuracy_between(&self, lo: usize, hi: usize) -> Option<f64> {
        let (mut n, mut err) = (0, 0.0);
        for &(blo, bhi, bn, be) in &self.buckets {
            if blo >= lo && bhi <= hi {
                if let Some(e) = be {
                    n += bn;
                    err += e * bn as f64;
                }
            }
        }
        (n > 0).then(|| 1.0 - err / n as f64)
    }
}

/// Mean per-text byte error in every `(lo, hi)` bucket of tokenized length.
/// Texts outside every bucket are ignored; a text is counted in the first
/// bucket that contains it.
pub fn eval_byte_error_by_bucket<T: Float, S: AsRef<str>>(
    model: &mut Autoencoder<T>,
    texts: &[S],
    buckets: &[(usize, usize)],
    batch_size: usize,
) -> Result<LengthBucketReport> {
    let bucket_of = |t: &str| buckets.iter().position(|&(lo, hi)| (lo..=hi).contains(&(t.len() + 1)));
    let kept: Vec<&str> = texts.iter().map(|t| t.as_ref()).filter(|t| bucket_of(t).is_some()).collect();
    let mut sums = vec![(0usize, 0.0f64); buckets.len()];
    for (idx, batch) in batches_by_length(&kept, &model.config, batch_size)? {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, ForwardMode::Infer, None)?;
        let slots = batch.slots();
        for (row, &i) in idx.iter().enumerate() {
            let (mut wrong, mut real) = (0, 0);
            for s in row * slots..(row + 1) * slots {
                if batch.mask[s] {
                    real += 1;
                    wrong += usize::from(out.argmax[s] != batch.ids[s]);
                }
            }
            let b = bucket_of(kept[i]).expect("filtered above");
            sums[b].0 += 1;
            sums[b].1 += wrong as f64 / real as f64;
        }
    }
    Ok(LengthBucketReport {
        buckets: buckets
            .iter()
            .zip(sums)
            .map(|(&(lo, hi), (n, e))| (lo, hi, n, (n > 0).then(|| e / n as f64)))
            .collect(),
    })
}

/// Buckets `(lo, hi)` at powers of two: `(1,1), (2,2), (3,4), (5,8), …`
/// up to `2^big_k`.
pub fn power_of_two_buckets(big_k: usize) -> Vec<(usize, usize)> {
    let mut v = vec![(1, 1)];
    for k in 1..=big_k {
        v.push(((1 << (k - 1)) + 1, 1 << k));
    }
    v
}

/// Trains `model` for `cfg.epochs` epochs from the seed in `cfg`, returning
/// the per-epoch stats.
pub fn fit<T: Float>(
    model: &mut Autoencoder<T>,
    sampler: &Sampler,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut sgd = Sgd::new(&model.params);
    let mut rng = Rng::new(cfg.seed).fork(1);
    let mut all = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(model, &mut sgd, sampler, cfg, epoch, &mut rng)?;
        on_epoch(&stats);
        all.push(stats);
    }
    Ok(all)
}

/// Sentence-pair classifier counterpart of [`calibrate_bn`].
pub fn calibrate_nli_bn<T: Float>(model: &mut NliModel<T>, sentences: &[Vec<String>], batch_size: usize) -> Result<()> {
    if sentences.is_empty() {
        return Err(Error::Data("cannot calibrate on an empty corpus".into()));
    }
    if model.config.norm != NormMode::Batch {
        return Ok(());
    }
    let mut target = 0;
    loop {
        let mut reached = false;
        for chunk in sentences.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut cursor = CalibCursor { target, visited: 0 };
            model.sentence_vectors_with(&mut tape, chunk, ForwardMode::Infer, Some(&mut cursor))?;
            reached |= cursor.visited > target;
        }
        if !reached {
            return Ok(());
        }
        for layer in model.norm_layers_mut() {
            layer.finish_calibration();
        }
        target += 1;
    }
}
