use super::{batch_sizes, clip_global_norm, lr_at_epoch, EpochStats, Sgd, TrainConfig};
use crate::error::{Error, Result};
use crate::model::NliModel;
use crate::nn::{ForwardMode, NormMode};
use crate::tensor::{Float, Rng, Tape};

/// A labelled sentence pair; `label` indexes [`crate::model::NLI_CLASSES`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NliExample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: usize,
}

/// One pass over `examples` in a shuffled order. The reported `byte_error`
/// is the classification error rate.
pub fn train_nli_epoch<T: Float>(
    model: &mut NliModel<T>,
    sgd: &mut Sgd<T>,
    examples: &[NliExample],
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    cfg.validate(model.config.norm)?;
    if examples.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    if examples.len() < 2 && model.config.norm == NormMode::Batch {
        return Err(Error::Data("batch normalization needs at least 2 training pairs".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let lr = lr_at_epoch(cfg, epoch);
    let (mut loss_sum, mut wrong, mut clips, mut steps) = (0.0, 0, 0, 0);
    let mut start = 0;
    for size in batch_sizes(examples.len(), cfg.batch_size) {
        let sel: Vec<&NliExample> = order[start..start + size].iter().map(|&i| &examples[i]).collect();
        start += size;
        let premises: Vec<&[String]> = sel.iter().map(|e| e.premise.as_slice()).collect();
        let hypotheses: Vec<&[String]> = sel.iter().map(|e| e.hypothesis.as_slice()).collect();
        let labels: Vec<usize> = sel.iter().map(|e| e.label).collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &premises, &hypotheses, &labels, ForwardMode::Train)?;
        let loss = tape.value(out.loss).item().to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}, step {steps}: training loss is {loss}")));
        }
        tape.backward(out.loss, &mut model.params)?;
        if let Some(c) = cfg.clip_norm {
            clips += usize::from(clip_global_norm(&mut model.params, c) < 1.0);
        }
        sgd.step(&mut model.params, lr, cfg.momentum);
        loss_sum += loss * size as f64;
        wrong += size - out.correct;
        steps += 1;
    }
    let n = examples.len() as f64;
    Ok(EpochStats { epoch, loss: loss_sum / n, byte_error: wrong as f64 / n, lr, clip_events: clips, steps })
}
