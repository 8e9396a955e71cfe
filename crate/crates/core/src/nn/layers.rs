use super::{fan_in_uniform, Ctx, NormLayer, NormMode, StepKey};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Rng, Tensor, Var};

/// Weights of a same-padded temporal convolution.
#[derive(Debug, Clone)]
pub struct Conv1dParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1dParams {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[out_channels, in_channels, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(&[out_channels], fan_in, rng));
        Conv1dParams { weight, bias, in_channels, out_channels, kernel }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel + out_channels
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape.conv1d(x, w, b, stride)
    }
}

/// Two convolutions with normalization and a post-activation residual:
/// `relu(norm2(conv2(relu(norm1(conv1(x))))) + x)`.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Float = f32> {
    pub conv1: Conv1dParams,
    pub norm1: NormLayer<T>,
    pub conv2: Conv1dParams,
    pub norm2: NormLayer<T>,
}

impl<T: Float> ResidualBlock<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        norm: NormMode,
        keys: &[StepKey],
        rng: &mut Rng,
    ) -> Self {
        ResidualBlock {
            conv1: Conv1dParams::new(store, &format!("{name}.conv1"), channels, channels, 3, rng),
            norm1: NormLayer::new(store, &format!("{name}.norm1"), channels, norm, keys),
            conv2: Conv1dParams::new(store, &format!("{name}.conv2"), channels, channels, 3, rng),
            norm2: NormLayer::new(store, &format!("{name}.norm2"), channels, norm, keys),
        }
    }

    pub fn param_count(channels: usize, norm: NormMode, keys: usize) -> usize {
        2 * Conv1dParams::param_count(channels, channels, 3) + 2 * NormLayer::<T>::param_count(channels, norm, keys)
    }

    pub fn forward(&mut self, ctx: &mut Ctx<'_, T>, x: Var, key: StepKey) -> Result<Var> {
        let h = self.conv1.forward(ctx, x, 1)?;
        let h = self.norm1.forward(ctx, h, key)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h, 1)?;
        let h = self.norm2.forward(ctx, h, key)?;
        let h = ctx.tape.add(h, x)?;
        ctx.tape.relu(h)
    }

    pub fn norms_mut(&mut self) -> [&mut NormLayer<T>; 2] {
        [&mut self.norm1, &mut self.norm2]
    }

    pub fn norms(&self) -> [&NormLayer<T>; 2] {
        [&self.norm1, &self.norm2]
    }
}

/// Token embedding table `[vocab, dim]`. A frozen table is looked up without
/// recording any gradient path.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vectors: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        let t = Tensor::new(&[vocab, dim], crate::tensor::Fill::Normal { mean: 0.0, std: 1.0 }, rng)
            .expect("embedding shape");
        let vectors = store.add(name.to_string(), t);
        EmbeddingTable { vectors, vocab, dim }
    }

    /// Wraps an existing `[vocab, dim]` tensor as a frozen table.
    pub fn frozen<T: Float>(store: &mut ParamStore<T>, name: &str, table: Tensor<T>) -> Result<Self> {
        let (vocab, dim) = match *table.shape() {
            [v, d] => (v, d),
            ref s => return Err(Error::InvalidArgument(format!("embedding table must be [V,d], got {s:?}"))),
        };
        let vectors = store.add_frozen(name.to_string(), table);
        Ok(EmbeddingTable { vectors, vocab, dim })
    }

    pub fn is_frozen<T: Float>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.vectors).frozen
    }

    /// `[B, dim, T]` for `ids` holding `batch` sequences back to back, or
    /// `[dim, len]` when `batch` is `None`.
    pub fn lookup<T: Float>(&self, ctx: &mut Ctx<'_, T>, ids: &[usize], batch: Option<usize>) -> Result<Var> {
        if self.is_frozen(ctx.params) {
            let v = crate::tensor::embedding_values(&ctx.params.get(self.vectors).value, ids, batch)?;
            Ok(ctx.tape.constant(v))
        } else {
            let table = ctx.param(self.vectors);
            ctx.tape.embedding(table, ids, batch)
        }
    }
}

/// Fully connected layer `W·x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[out_features, in_features], in_features, rng));
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(&[out_features], in_features, rng));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape.linear(x, w, b)
    }
}
