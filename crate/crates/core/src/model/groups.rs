use crate::error::Result;
use crate::nn::{Conv1dParams, Ctx, NormLayer, NormMode, ResidualBlock, StepKey};
use crate::tensor::{Float, ParamStore, Rng, Var};

fn blocks<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    count: usize,
    d: usize,
    norm: NormMode,
    keys: &[StepKey],
    rng: &mut Rng,
) -> Vec<ResidualBlock<T>> {
    (0..count).map(|i| ResidualBlock::new(store, &format!("{name}.{i}"), d, norm, keys, rng)).collect()
}

/// Prefix group followed by the weight-shared recursive group that halves
/// the sequence on every application.
#[derive(Debug, Clone)]
pub struct Encoder<T: Float = f32> {
    pub prefix: Vec<ResidualBlock<T>>,
    pub recursive: Vec<ResidualBlock<T>>,
}

impl<T: Float> Encoder<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        n_layers: usize,
        d: usize,
        norm: NormMode,
        single_keys: &[StepKey],
        recursive_keys: &[StepKey],
        rng: &mut Rng,
    ) -> Self {
        let half = n_layers / 2;
        Encoder {
            prefix: blocks(store, &format!("{name}.prefix"), half, d, norm, single_keys, rng),
            recursive: blocks(store, &format!("{name}.recursive"), half, d, norm, recursive_keys, rng),
        }
    }

    /// `[B, d, 2^big_k]` to `[B, d, 2^r]`.
    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, mut x: Var, big_k: usize, r: usize) -> Result<Var> {
        for blk in &mut self.prefix {
            x = blk.forward(ctx, x, StepKey::new(0, big_k))?;
        }
        for step in 0..big_k - r {
            let key = StepKey::new(step, big_k);
            for blk in &mut self.recursive {
                x = blk.forward(ctx, x, key)?;
            }
            x = ctx.tape.maxpool2(x)?;
        }
        Ok(x)
    }

    pub fn norms(&self) -> Vec<&NormLayer<T>> {
        self.prefix.iter().chain(&self.recursive).flat_map(|b| b.norms()).collect()
    }

    pub fn norms_mut(&mut self) -> Vec<&mut NormLayer<T>> {
        self.prefix.iter_mut().chain(&mut self.recursive).flat_map(|b| b.norms_mut()).collect()
    }
}

/// First block of a decoder application: doubles the channels, trades them
/// for length, and adds the input stacked with itself as the skip path.
#[derive(Debug, Clone)]
pub struct UpBlock<T: Float = f32> {
    pub conv_up: Conv1dParams,
    pub norm_up: NormLayer<T>,
    pub conv: Conv1dParams,
    pub norm: NormLayer<T>,
}

impl<T: Float> UpBlock<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, d: usize, norm: NormMode, keys: &[StepKey], rng: &mut Rng) -> Self {
        UpBlock {
            conv_up: Conv1dParams::new(store, &format!("{name}.conv_up"), d, 2 * d, 3, rng),
            norm_up: NormLayer::new(store, &format!("{name}.norm_up"), 2 * d, norm, keys),
            conv: Conv1dParams::new(store, &format!("{name}.conv"), d, d, 3, rng),
            norm: NormLayer::new(store, &format!("{name}.norm"), d, norm, keys),
        }
    }

    /// `[B, d, T]` to `[B, d, 2T]`.
    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, x: Var, key: StepKey) -> Result<Var> {
        let h = self.conv_up.forward(ctx, x, 1)?;
        let h = self.norm_up.forward(ctx, h, key)?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.tape.expand1d(h)?;
        let h = self.conv.forward(ctx, h, 1)?;
        let h = self.norm.forward(ctx, h, key)?;
        let stacked = ctx.tape.concat_channels(x, x)?;
        let skip = ctx.tape.expand1d(stacked)?;
        let h = ctx.tape.add(h, skip)?;
        ctx.tape.relu(h)
    }

    fn norms(&self) -> [&NormLayer<T>; 2] {
        [&self.norm_up, &self.norm]
    }

    fn norms_mut(&mut self) -> [&mut NormLayer<T>; 2] {
        [&mut self.norm_up, &mut self.norm]
    }
}

/// Weight-shared recursive group that doubles the sequence on every
/// application, then the postfix group and a per-position projection to
/// vocabulary logits.
#[derive(Debug, Clone)]
pub struct Decoder<T: Float = f32> {
    pub up: UpBlock<T>,
    pub recursive: Vec<ResidualBlock<T>>,
    pub postfix: Vec<ResidualBlock<T>>,
    pub output: Conv1dParams,
}

impl<T: Float> Decoder<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        n_layers: usize,
        d: usize,
        vocab: usize,
        norm: NormMode,
        single_keys: &[StepKey],
        recursive_keys: &[StepKey],
        rng: &mut Rng,
    ) -> Self {
        let half = n_layers / 2;
        Decoder {
            up: UpBlock::new(store, &format!("{name}.up"), d, norm, recursive_keys, rng),
            recursive: blocks(store, &format!("{name}.recursive"), half - 1, d, norm, recursive_keys, rng),
            postfix: blocks(store, &format!("{name}.postfix"), half, d, norm, single_keys, rng),
            output: Conv1dParams::new(store, &format!("{name}.output"), d, vocab, 1, rng),
        }
    }

    /// `[B, d, 2^r]` to logits `[B, vocab, 2^big_k]`.
    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, mut x: Var, big_k: usize, r: usize) -> Result<Var> {
        for step in 0..big_k - r {
            let key = StepKey::new(step, big_k);
            x = self.up.forward(ctx, x, key)?;
            for blk in &mut self.recursive {
                x = blk.forward(ctx, x, key)?;
            }
        }
        for blk in &mut self.postfix {
            x = blk.forward(ctx, x, StepKey::new(0, big_k))?;
        }
        self.output.forward(ctx, x, 1)
    }

    pub fn norms(&self) -> Vec<&NormLayer<T>> {
        let mut out: Vec<&NormLayer<T>> = self.up.norms().into();
        out.extend(self.recursive.iter().chain(&self.postfix).flat_map(|b| b.norms()));
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut NormLayer<T>> {
        let mut out: Vec<&mut NormLayer<T>> = self.up.norms_mut().into();
        out.extend(self.recursive.iter_mut().chain(&mut self.postfix).flat_map(|b| b.norms_mut()));
        out
    }
}
