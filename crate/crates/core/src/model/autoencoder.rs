use super::{argmax_ids, Batch, Decoder, Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{CalibCursor, Ctx, EmbeddingTable, ForwardMode, NormLayer};
use crate::tensor::{Float, ParamStore, Rng, Tape, Var};

/// Byte-level recursive convolutional auto-encoder.
#[derive(Debug, Clone)]
pub struct Autoencoder<T: Float = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embedding: EmbeddingTable,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

/// Result of one auto-encoding pass over a batch.
#[derive(Debug, Clone)]
pub struct AeOutput {
    /// `[B, vocab, 2^k]`.
    pub logits: Var,
    /// Mean cross-entropy over every slot, pads included.
    pub loss: Var,
    /// Predicted id per slot, batch-major.
    pub argmax: Vec<usize>,
    /// Real-token slots whose prediction differs from the input.
    pub errors: usize,
    pub real: usize,
}

impl AeOutput {
    pub fn byte_error(&self) -> f64 {
        self.errors as f64 / self.real as f64
    }
}

impl<T: Float> Autoencoder<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (single, rec) = (config.single_keys(), config.recursive_keys());
        let embedding = EmbeddingTable::new(&mut params, "embedding", config.vocab_size, config.d, rng);
        let encoder = Encoder::new(&mut params, "encoder", config.n_layers, config.d, config.norm, &single, &rec, rng);
        let decoder = Decoder::new(
            &mut params,
            "decoder",
            config.n_layers,
            config.d,
            config.vocab_size,
            config.norm,
            &single,
            &rec,
            rng,
        );
        Ok(Autoencoder { config, params, embedding, encoder, decoder })
    }

    /// Rejects padded lengths the model was not built for.
    pub fn check_length(&self, big_k: usize) -> Result<()> {
        if self.config.length_classes().contains(&big_k) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "autoencoder input",
                left: vec![1 << big_k],
                right: self.config.length_classes().iter().map(|k| 1 << k).collect(),
            })
        }
    }

    /// Embedded ids, `[B, d, T]`.
    pub fn embed(&self, tape: &mut Tape<T>, ids: &[usize], batch: usize) -> Result<Var> {
        let mut ctx = Ctx::new(tape, &self.params, ForwardMode::Infer);
        self.embedding.lookup(&mut ctx, ids, Some(batch))
    }

    /// Encoder and decoder applied to an already embedded input; returns
    /// logits `[B, vocab, T]`. A calibration cursor is advanced in place.
    pub fn run_embedded(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        big_k: usize,
        mode: ForwardMode,
        calib: Option<&mut CalibCursor>,
    ) -> Result<Var> {
        self.check_length(big_k)?;
        let r = self.config.r;
        let mut ctx = Ctx::new(tape, &self.params, mode);
        ctx.calib = calib.as_deref().copied();
        let z = self.encoder.forward(&mut ctx, x, big_k, r)?;
        let logits = self.decoder.forward(&mut ctx, z, big_k, r)?;
        if let (Some(c), Some(after)) = (calib, ctx.calib) {
            *c = after;
        }
        Ok(logits)
    }

    /// Latent codes `[B, d, 2^r]`.
    pub fn encode(&mut self, tape: &mut Tape<T>, batch: &Batch, mode: ForwardMode) -> Result<Var> {
        self.check_length(batch.big_k)?;
        let x = self.embed(tape, &batch.ids, batch.size)?;
        let mut ctx = Ctx::new(tape, &self.params, mode);
        self.encoder.forward(&mut ctx, x, batch.big_k, self.config.r)
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Batch,
        mode: ForwardMode,
        calib: Option<&mut CalibCursor>,
    ) -> Result<AeOutput> {
        let x = self.embed(tape, &batch.ids, batch.size)?;
        let logits = self.run_embedded(tape, x, batch.big_k, mode, calib)?;
        let flat = tape.positions_major(logits)?;
        let loss = tape.softmax_xent(flat, &batch.ids, None)?;
        let argmax = argmax_ids(tape.value(logits));
        let errors = argmax
            .iter()
            .zip(&batch.ids)
            .zip(&batch.mask)
            .filter(|((p, t), &m)| m && p != t)
            .count();
        Ok(AeOutput { logits, loss, argmax, errors, real: batch.real_tokens() })
    }

    pub fn norm_layers(&self) -> Vec<&NormLayer<T>> {
        let mut v = self.encoder.norms();
        v.extend(self.decoder.norms());
        v
    }

    pub fn norm_layers_mut(&mut self) -> Vec<&mut NormLayer<T>> {
        let mut v = self.encoder.norms_mut();
        v.extend(self.decoder.norms_mut());
        v
    }
}
