//! Layers on top of the tape: temporal convolution, normalization with
//! per-recursion-step statistics, residual blocks, embeddings and linear maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Fill, Float, ParamId, ParamStore, Rng, Tape, Tensor, Var};

mod layers;

pub use layers::{Conv1dParams, EmbeddingTable, Linear, ResidualBlock};

/// Epsilon inside the square root of every normalization layer.
pub const NORM_EPS: f64 = 1e-5;
/// Default running-statistics momentum.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Batch,
    Instance,
    None,
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormMode::Batch),
            "instance" => Ok(NormMode::Instance),
            "none" => Ok(NormMode::None),
            _ => Err(Error::Config(format!("unknown norm mode {s:?} (batch|instance|none)"))),
        }
    }
}

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Stored running statistics of the current step key.
    Infer,
    /// Statistics of the batch at hand, without updating anything.
    BatchCalibrated,
}

/// Index of a recursive application, plus the log2 input length it ran at.
///
/// In the fixed-length padding modes `k` is always the model's `K`; the
/// legacy nearest-power mode keys statistics by both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepKey {
    pub step: usize,
    pub k: usize,
}

impl StepKey {
    pub fn new(step: usize, k: usize) -> Self {
        StepKey { step, k }
    }
}

#[derive(Debug, Clone, Default)]
struct CalibAccum {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl CalibAccum {
    /// Chan et al. pairwise merge of a batch's (count, mean, population var).
    fn merge<T: Float>(&mut self, n: f64, mean: &[T], var: &[T]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; mean.len()];
            self.m2 = vec![0.0; mean.len()];
        }
        let total = self.count + n;
        for c in 0..mean.len() {
            let bm = mean[c].to_f64().unwrap_or(f64::NAN);
            let bv = var[c].to_f64().unwrap_or(f64::NAN);
            let delta = bm - self.mean[c];
            self.mean[c] += delta * n / total;
            self.m2[c] += bv * n + delta * delta * self.count * n / total;
        }
        self.count = total;
    }
}

/// Normalization state of one layer at one step key.
#[derive(Debug, Clone)]
pub struct NormStats<T: Float = f32> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub key: StepKey,
    /// Number of times the running statistics were written.
    pub updates: u64,
    calib: Option<CalibAccum>,
}

/// Cursor used while recomputing running statistics layer by layer.
///
/// Normalization applications are numbered in execution order. Those before
/// `target` use their (already recomputed) running statistics, the one at
/// `target` accumulates exact statistics of its input, later ones use batch
/// statistics since their output is discarded.
#[derive(Debug, Clone, Copy)]
pub struct CalibCursor {
    pub target: usize,
    pub visited: usize,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub mode: ForwardMode,
    pub calib: Option<CalibCursor>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, mode: ForwardMode) -> Self {
        Ctx { tape, params, mode, calib: None }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }
}

/// A normalization layer with one [`NormStats`] per step key.
///
/// Convolution weights are shared across recursive applications but the
/// activation statistics are not, so every application gets its own entry.
#[derive(Debug, Clone)]
pub struct NormLayer<T: Float = f32> {
    pub name: String,
    pub mode: NormMode,
    pub channels: usize,
    pub stats: BTreeMap<StepKey, NormStats<T>>,
}

impl<T: Float> NormLayer<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize, mode: NormMode, keys: &[StepKey]) -> Self {
        let mut stats = BTreeMap::new();
        if mode != NormMode::None {
            for &key in keys {
                let tag = format!("{name}.s{}k{}", key.step, key.k);
                let gamma = store.add(format!("{tag}.gamma"), Tensor::full(&[channels], T::one()));
                let beta = store.add(format!("{tag}.beta"), Tensor::zeros(&[channels]));
                stats.insert(
                    key,
                    NormStats {
                        gamma,
                        beta,
                        running_mean: vec![T::zero(); channels],
                        running_var: vec![T::one(); channels],
                        momentum: NORM_MOMENTUM,
                        key,
                        updates: 0,
                        calib: None,
                    },
                );
            }
        }
        NormLayer { name: name.to_string(), mode, channels, stats }
    }

    pub fn stats_for(&self, key: StepKey) -> Option<&NormStats<T>> {
        self.stats.get(&key)
    }

    pub fn set_momentum(&mut self, momentum: f64) {
        self.stats.values_mut().for_each(|s| s.momentum = momentum);
    }

    /// Scale/shift parameter count (`2·channels` per key).
    pub fn param_count(channels: usize, mode: NormMode, keys: usize) -> usize {
        match mode {
            NormMode::None => 0,
            _ => 2 * channels * keys,
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, x: Var, key: StepKey) -> Result<Var> {
        if self.mode == NormMode::None {
            return Ok(x);
        }
        let name = &self.name;
        let st = self
            .stats
            .get_mut(&key)
            .ok_or_else(|| Error::InvalidArgument(format!("{name}: no statistics for step {key:?}")))?;
        let (gamma, beta) = (ctx.param(st.gamma), ctx.param(st.beta));
        let eps = T::of(NORM_EPS);
        if self.mode == NormMode::Instance {
            return ctx.tape.instance_norm(x, gamma, beta, eps);
        }

        let mut mode = ctx.mode;
        let mut collect = false;
        if let Some(cur) = ctx.calib.as_mut() {
            let idx = cur.visited;
            cur.visited += 1;
            mode = match idx.cmp(&cur.target) {
                std::cmp::Ordering::Less => ForwardMode::Infer,
                std::cmp::Ordering::Equal => {
                    collect = true;
                    ForwardMode::BatchCalibrated
                }
                std::cmp::Ordering::Greater => ForwardMode::BatchCalibrated,
            };
        }

        let shape = ctx.tape.shape(x).to_vec();
        let (bsz, t) = if shape.len() == 3 { (shape[0], shape[2]) } else { (1, shape[1]) };
        match mode {
            ForwardMode::Train => {
                if bsz < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: batch normalization in train mode needs at least 2 samples"
                    )));
                }
                let (y, mean, var) = ctx.tape.batch_norm(x, gamma, beta, None, eps)?;
                let m = T::of(st.momentum);
                let keep = T::one() - m;
                for c in 0..mean.len() {
                    st.running_mean[c] = keep * st.running_mean[c] + m * mean[c];
                    st.running_var[c] = keep * st.running_var[c] + m * var[c];
                }
                st.updates += 1;
                Ok(y)
            }
            ForwardMode::Infer => {
                if st.updates == 0 {
                    return Err(Error::StatsNotReady(format!("{name} step {} (k={})", key.step, key.k)));
                }
                let (y, _, _) =
                    ctx.tape.batch_norm(x, gamma, beta, Some((&st.running_mean, &st.running_var)), eps)?;
                Ok(y)
            }
            ForwardMode::BatchCalibrated => {
                let (y, mean, var) = ctx.tape.batch_norm(x, gamma, beta, None, eps)?;
                if collect {
                    st.calib.get_or_insert_with(CalibAccum::default).merge((bsz * t) as f64, &mean, &var);
                }
                Ok(y)
            }
        }
    }

    /// Writes accumulated calibration statistics into the running statistics.
    /// Returns how many step keys were finalized.
    pub fn finish_calibration(&mut self) -> usize {
        let mut n = 0;
        for st in self.stats.values_mut() {
            if let Some(acc) = st.calib.take() {
                if acc.count > 0.0 {
                    st.running_mean = acc.mean.iter().map(|&v| T::of(v)).collect();
                    st.running_var = acc.m2.iter().map(|&v| T::of(v / acc.count)).collect();
                    st.updates += 1;
                    n += 1;
                }
            }
        }
        n
    }
}

/// Uniform `±1/sqrt(fan_in)` initializer for weights and biases.
pub(crate) fn fan_in_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(shape, Fill::Uniform(-bound, bound), rng).expect("initializer shape")
}

#[cfg(test)]
mod tests;
