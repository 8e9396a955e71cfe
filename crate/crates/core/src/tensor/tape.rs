//! Reverse-mode tape over the closed op set the models need.
//!
//! Activations use a `[B, C, T]` layout (batch, channels, time). Rank-2
//! `[C, T]` inputs are accepted wherever a batch is expected and are treated
//! as `B = 1`; the output keeps the caller's rank.

use std::collections::HashMap;

use super::{gemm, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormGroups {
    /// One statistic per channel over (B, T).
    PerChannel,
    /// One statistic per (sample, channel) over T.
    PerInstance,
}

#[derive(Debug)]
enum Op<T: Float> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        left: Vec<bool>,
    },
    Expand(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        groups: NormGroups,
        through_stats: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        rows: Vec<(usize, usize)>,
    },
    LogSoftmaxPick {
        logits: Var,
        probs: Vec<T>,
        picks: Vec<(usize, usize)>,
    },
    PositionsMajor(Var),
}

#[derive(Debug)]
struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add parameter gradients into the store (`grad +=`).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                let p = store.get_mut(id);
                if p.frozen {
                    continue;
                }
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

/// Records executed ops so gradients can be replayed in reverse order.
#[derive(Debug, Default)]
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    grads: Option<Gradients<T>>,
    consumed: bool,
}

fn mismatch(op: &'static str, l: &[usize], r: &[usize]) -> Error {
    Error::ShapeMismatch { op, left: l.to_vec(), right: r.to_vec() }
}

/// `(B, C, T)` view of a rank-2 or rank-3 activation.
fn bct(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::InvalidArgument(format!("{op}: expected [C,T] or [B,C,T], got {shape:?}"))),
    }
}

fn with_bct(rank: usize, b: usize, c: usize, t: usize) -> Vec<usize> {
    if rank == 2 {
        vec![c, t]
    } else {
        vec![b, c, t]
    }
}

/// Output steps `lo..hi` whose tap `j` reads inside the unpadded input.
fn valid_range(j: usize, stride: usize, pad: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j).div_ceil(stride);
    let hi = if t_in + pad > j { ((t_in + pad - j - 1) / stride + 1).min(t_out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Float>(
    x: &[T],
    (bsz, ci, t_in): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Vec<T> {
    let cols_n = bsz * t_out;
    let mut cols = vec![T::zero(); ci * k * cols_n];
    for i in 0..ci {
        for j in 0..k {
            let row = &mut cols[(i * k + j) * cols_n..(i * k + j + 1) * cols_n];
            for b in 0..bsz {
                let src = &x[(b * ci + i) * t_in..(b * ci + i + 1) * t_in];
                let dst = &mut row[b * t_out..(b + 1) * t_out];
                let (lo, hi) = valid_range(j, stride, pad, t_in, t_out);
                if stride == 1 {
                    dst[lo..hi].copy_from_slice(&src[lo + j - pad..hi + j - pad]);
                } else {
                    for t in lo..hi {
                        dst[t] = src[t * stride + j - pad];
                    }
                }
            }
        }
    }
    cols
}

fn log_softmax_rows<T: Float>(logits: &[T], v: usize) -> Vec<T> {
    // Returns probabilities; callers take logs where needed.
    let mut probs = vec![T::zero(); logits.len()];
    for (row, out) in logits.chunks(v).zip(probs.chunks_mut(v)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &l) in out.iter_mut().zip(row) {
            *o = (l - m).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o = *o / z;
        }
    }
    probs
}

fn log_softmax_at<T: Float>(row: &[T], idx: usize) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&l| (l - m).exp()).sum();
    row[idx] - m - z.ln()
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            param_order: Vec::new(),
            grads: None,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        self.nodes.push(Node { value, op: node_op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.as_ref().and_then(|g| g.get(v))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is recorded (inputs of gradient checks and attributions).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so every use of a shared weight feeds one accumulated gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.frozen {
            self.constant(p.value.clone())
        } else {
            self.nodes.push(Node { value: p.value.clone(), op: Op::Param, needs_grad: true });
            let v = Var(self.nodes.len() - 1);
            self.param_order.push((id, v));
            v
        };
        self.param_vars.insert(id, v);
        v
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor { shape: x.shape().to_vec(), data }
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor { shape: x.shape().to_vec(), data: x.data().iter().map(|&p| f(p)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.map(a, |p| p * s);
        let ng = self.ng(a);
        self.push("scale", out, Op::Scale(a, s), ng)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |p| if p > T::zero() { p } else { T::zero() });
        let ng = self.ng(a);
        self.push("relu", out, Op::Relu(a), ng)
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |p| p.abs());
        let ng = self.ng(a);
        self.push("abs", out, Op::Abs(a), ng)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        self.push("reshape", out, Op::Reshape(a), ng)
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let same_elsewhere = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (p, q))| i == axis || p == q);
        if !same_elsewhere {
            return Err(mismatch("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_inner, b_inner) = (sa[axis] * inner, sb[axis] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&vb[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let ng = self.ng(a) || self.ng(b);
        self.push("concat", Tensor { shape, data }, Op::Concat { a, b, outer, a_inner, b_inner }, ng)
    }

    /// Concatenation along the channel axis of `[C,T]` or `[B,C,T]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 || self.shape(b).len() != rank {
            return Err(mismatch("concat_channels", self.shape(a), self.shape(b)));
        }
        self.concat(a, b, rank - 2)
    }

    /// Same-padded temporal cross-correlation.
    ///
    /// `w` is `[C_out, C_in, k]` with odd `k`, `b` is `[C_out]`. The input is
    /// zero-padded by `(k-1)/2` on each side and the output length is `T/stride`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (bsz, ci, t_in) = bct("conv1d", &xs)?;
        let (co, wci, k) = match *self.shape(w) {
            [co, wci, k] => (co, wci, k),
            ref s => return Err(Error::InvalidArgument(format!("conv1d: weight must be rank 3, got {s:?}"))),
        };
        if wci != ci {
            return Err(Error::ChannelMismatch { op: "conv1d", expected: wci, got: ci });
        }
        if self.shape(b) != [co] {
            return Err(mismatch("conv1d bias", self.shape(b), &[co]));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv1d: kernel size {k} must be odd")));
        }
        if stride == 0 || t_in % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d: length {t_in} not divisible by stride {stride}"
            )));
        }
        let pad = (k - 1) / 2;
        let t_out = t_in / stride;
        let cols = im2col(self.value(x).data(), (bsz, ci, t_in), k, stride, pad, t_out);
        let n = bsz * t_out;
        let mut y = vec![T::zero(); co * n];
        gemm(co, ci * k, n, self.value(w).data(), (ci * k, 1), &cols, (n, 1), T::zero(), &mut y, (n, 1));
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); bsz * co * t_out];
        for o in 0..co {
            for bi in 0..bsz {
                let src = &y[o * n + bi * t_out..o * n + (bi + 1) * t_out];
                let dst = &mut out[(bi * co + o) * t_out..(bi * co + o + 1) * t_out];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let shape = with_bct(xs.len(), bsz, co, t_out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push("conv1d", Tensor { shape, data: out }, Op::Conv1d { x, w, b, stride, pad }, ng)
    }

    /// Max over non-overlapping pairs of time steps; ties go to the left element.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (bsz, c, t) = bct("maxpool1d", &xs)?;
        if t % 2 != 0 {
            return Err(Error::InvalidArgument(format!("maxpool1d: odd length {t}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() / 2);
        let mut left = Vec::with_capacity(xv.len() / 2);
        for pair in xv.chunks_exact(2) {
            let l = pair[0] >= pair[1];
            left.push(l);
            out.push(if l { pair[0] } else { pair[1] });
        }
        let shape = with_bct(xs.len(), bsz, c, t / 2);
        let ng = self.ng(x);
        self.push("maxpool1d", Tensor { shape, data: out }, Op::MaxPool2 { x, left }, ng)
    }

    /// `[2d, T] -> [d, 2T]` with `out[c, 2t] = x[c, t]` and `out[c, 2t+1] = x[c+d, t]`.
    pub fn expand1d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (bsz, c2, t) = bct("expand1d", &xs)?;
        if c2 % 2 != 0 {
            return Err(Error::InvalidArgument(format!("expand1d: odd channel count {c2}")));
        }
        let d = c2 / 2;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for c in 0..d {
                let lo = &xv[(b * c2 + c) * t..(b * c2 + c + 1) * t];
                let hi = &xv[(b * c2 + c + d) * t..(b * c2 + c + d + 1) * t];
                let dst = &mut out[(b * d + c) * 2 * t..(b * d + c + 1) * 2 * t];
                for i in 0..t {
                    dst[2 * i] = lo[i];
                    dst[2 * i + 1] = hi[i];
                }
            }
        }
        let shape = with_bct(xs.len(), bsz, d, 2 * t);
        let ng = self.ng(x);
        self.push("expand1d", Tensor { shape, data: out }, Op::Expand(x), ng)
    }

    /// Per-channel normalization over (B, T) followed by `gamma·x̂ + beta`.
    ///
    /// With `stats = None` the batch statistics are used and gradients flow
    /// through them. With `Some((mean, var))` the given statistics are treated
    /// as constants. Returns the output and the batch mean/variance
    /// (population variance) that were computed.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        self.norm(x, gamma, beta, stats, eps, NormGroups::PerChannel)
    }

    /// Per-(sample, channel) normalization over T followed by `gamma·x̂ + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (_, _, t) = bct("instance_norm", self.shape(x))?;
        if t < 2 {
            return Err(Error::InvalidArgument("instance_norm: length must be at least 2".into()));
        }
        Ok(self.norm(x, gamma, beta, None, eps, NormGroups::PerInstance)?.0)
    }

    fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
        groups: NormGroups,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        let (bsz, c, t) = bct("norm", &xs)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("norm affine", self.shape(gamma), &[c]));
        }
        let xv = self.value(x).data();
        let n_groups = match groups {
            NormGroups::PerChannel => c,
            NormGroups::PerInstance => bsz * c,
        };
        let group_of = |b: usize, ch: usize| match groups {
            NormGroups::PerChannel => ch,
            NormGroups::PerInstance => b * c + ch,
        };
        let count = T::of(match groups {
            NormGroups::PerChannel => (bsz * t) as f64,
            NormGroups::PerInstance => t as f64,
        });
        let mut mean = vec![T::zero(); n_groups];
        let mut var = vec![T::zero(); n_groups];
        for b in 0..bsz {
            for ch in 0..c {
                let row = &xv[(b * c + ch) * t..(b * c + ch + 1) * t];
                mean[group_of(b, ch)] += row.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for b in 0..bsz {
            for ch in 0..c {
                let g = group_of(b, ch);
                let row = &xv[(b * c + ch) * t..(b * c + ch + 1) * t];
                var[g] += row.iter().map(|&v| (v - mean[g]) * (v - mean[g])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / count);
        let (use_mean, use_var) = match stats {
            Some((m, v)) => {
                if m.len() != n_groups || v.len() != n_groups {
                    return Err(mismatch("norm stats", &[m.len()], &[n_groups]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => (mean.clone(), var.clone()),
        };
        let inv_std: Vec<T> = use_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let g = group_of(b, ch);
                let base = (b * c + ch) * t;
                for i in base..base + t {
                    xhat[i] = (xv[i] - use_mean[g]) * inv_std[g];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::Norm { x, gamma, beta, xhat, inv_std, groups, through_stats: stats.is_none() };
        let v = self.push("norm", Tensor { shape: xs, data: out }, op, ng)?;
        Ok((v, mean, var))
    }

    /// Rows of `table` (`[V, d]`) gathered into `[B, d, T]` (or `[d, T]` when `batch` is `None`).
    pub fn embedding(&mut self, table: Var, ids: &[usize], batch: Option<usize>) -> Result<Var> {
        let out = embedding_values(self.value(table), ids, batch)?;
        let ng = self.ng(table);
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    /// `x·Wᵀ + b` for `x` of shape `[n]` or `[B, n]`, `W` of shape `[m, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, n) = match *xs {
            [n] => (1, n),
            [r, n] => (r, n),
            _ => return Err(Error::InvalidArgument(format!("linear: input must be rank 1 or 2, got {xs:?}"))),
        };
        let (m, wn) = match *self.shape(w) {
            [m, wn] => (m, wn),
            ref s => return Err(Error::InvalidArgument(format!("linear: weight must be rank 2, got {s:?}"))),
        };
        if wn != n {
            return Err(mismatch("linear", &xs, self.shape(w)));
        }
        if self.shape(b) != [m] {
            return Err(mismatch("linear bias", self.shape(b), &[m]));
        }
        let mut out = vec![T::zero(); rows * m];
        for r in 0..rows {
            out[r * m..(r + 1) * m].copy_from_slice(self.value(b).data());
        }
        gemm(rows, n, m, self.value(x).data(), (n, 1), self.value(w).data(), (1, n), T::one(), &mut out, (m, 1));
        let shape = if xs.len() == 1 { vec![m] } else { vec![rows, m] };
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push("linear", Tensor { shape, data: out }, Op::Linear { x, w, b }, ng)
    }

    /// `[B, V, T] -> [B·T, V]`, row `b·T + t` holding the scores of position `t` of sample `b`.
    pub fn positions_major(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (bsz, v, t) = bct("positions_major", &xs)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for c in 0..v {
                for i in 0..t {
                    out[(b * t + i) * v + c] = xv[(b * v + c) * t + i];
                }
            }
        }
        let ng = self.ng(x);
        self.push("positions_major", Tensor { shape: vec![bsz * t, v], data: out }, Op::PositionsMajor(x), ng)
    }

    /// Mean over selected rows of `-log softmax(logits[p])[targets[p]]`.
    ///
    /// `logits` is `[P, V]`. `mask`, when given, selects rows; it must select at least one.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let (p, v) = match *self.shape(logits) {
            [p, v] => (p, v),
            ref s => return Err(Error::InvalidArgument(format!("softmax_xent: logits must be [P,V], got {s:?}"))),
        };
        if targets.len() != p {
            return Err(mismatch("softmax_xent targets", &[targets.len()], &[p]));
        }
        if let Some(m) = mask {
            if m.len() != p {
                return Err(mismatch("softmax_xent mask", &[m.len()], &[p]));
            }
        }
        let mut rows = Vec::new();
        for (i, &tgt) in targets.iter().enumerate() {
            if mask.map_or(true, |m| m[i]) {
                if tgt >= v {
                    return Err(Error::IndexOutOfRange { what: "target", index: tgt, bound: v });
                }
                rows.push((i, tgt));
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("softmax_xent: mask selects no positions".into()));
        }
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for &(i, tgt) in &rows {
            total -= log_softmax_at(&lv[i * v..(i + 1) * v], tgt);
        }
        let loss = total / T::of(rows.len() as f64);
        let probs = log_softmax_rows(lv, v);
        let ng = self.ng(logits);
        self.push("softmax_xent", Tensor::scalar(loss), Op::SoftmaxXent { logits, probs, rows }, ng)
    }

    /// `Σ log softmax(logits[p])[v]` over the given `(p, v)` picks.
    pub fn log_softmax_pick(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (p, v) = match *self.shape(logits) {
            [p, v] => (p, v),
            ref s => return Err(Error::InvalidArgument(format!("log_softmax_pick: logits must be [P,V], got {s:?}"))),
        };
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for &(i, c) in picks {
            if i >= p || c >= v {
                return Err(Error::IndexOutOfRange { what: "pick", index: i.max(c), bound: p.min(v) });
            }
            total += log_softmax_at(&lv[i * v..(i + 1) * v], c);
        }
        let probs = log_softmax_rows(lv, v);
        let ng = self.ng(logits);
        self.push(
            "log_softmax_pick",
            Tensor::scalar(total),
            Op::LogSoftmaxPick { logits, probs, picks: picks.to_vec() },
            ng,
        )
    }

    /// Gradients of scalar `out` with respect to every node, without consuming the tape.
    pub fn gradients(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::NotScalar(self.shape(out).to_vec()));
        }
        self.gradients_seeded(out, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ out` for a
    /// non-scalar `out`.
    pub fn gradients_seeded(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(mismatch("gradient seed", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor { shape: n.value.shape().to_vec(), data: d }))
            .collect();
        Ok(Gradients { grads, params: self.param_order.clone() })
    }

    /// Reverse sweep from scalar `loss`: parameter gradients are added into
    /// `store` and leaf gradients become available through [`Tape::grad`].
    /// A tape can be swept once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let grads = self.gradients(loss)?;
        grads.accumulate_into(store);
        self.grads = Some(grads);
        self.consumed = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$dst:ident| $body:block) => {
                if let Some($dst) = slot(grads, nodes, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                with_grad!(*a, |d| { d.iter_mut().zip(g).for_each(|(d, &g)| *d += g); });
                with_grad!(*b, |d| { d.iter_mut().zip(g).for_each(|(d, &g)| *d += g); });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |d| { d.iter_mut().zip(g).for_each(|(d, &g)| *d += g); });
                with_grad!(*b, |d| { d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g); });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                with_grad!(*a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(&bv) {
                        *d += g * y;
                    }
                });
                with_grad!(*b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(&av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad!(*a, |d| { d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s); });
            }
            Op::Relu(a) => {
                let x = val(*a);
                with_grad!(*a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(*a);
                with_grad!(*a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        } else if x < T::zero() {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |d| { d.iter_mut().for_each(|d| *d += g[0]); });
            }
            Op::Reshape(a) => {
                with_grad!(*a, |d| { d.iter_mut().zip(g).for_each(|(d, &g)| *d += g); });
            }
            Op::PositionsMajor(a) => {
                let (bsz, v, t) = bct("positions_major", nodes[a.0].value.shape()).expect("checked");
                with_grad!(*a, |d| {
                    for b in 0..bsz {
                        for c in 0..v {
                            for s in 0..t {
                                d[(b * v + c) * t + s] += g[(b * t + s) * v + c];
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b, outer, a_inner, b_inner } => {
                let row = a_inner + b_inner;
                with_grad!(*a, |d| {
                    for o in 0..*outer {
                        for (d, &g) in d[o * a_inner..(o + 1) * a_inner].iter_mut().zip(&g[o * row..o * row + a_inner]) {
                            *d += g;
                        }
                    }
                });
                with_grad!(*b, |d| {
                    for o in 0..*outer {
                        for (d, &g) in d[o * b_inner..(o + 1) * b_inner].iter_mut().zip(&g[o * row + a_inner..(o + 1) * row]) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (bsz, ci, t_in) = bct("conv1d", nodes[x.0].value.shape()).expect("checked");
                let wshape = nodes[w.0].value.shape();
                let (co, k) = (wshape[0], wshape[2]);
                let t_out = t_in / stride;
                let n = bsz * t_out;
                // Upstream gradient rearranged to [C_out, B·T_out].
                let mut gy = vec![T::zero(); co * n];
                for bi in 0..bsz {
                    for o in 0..co {
                        let src = &g[(bi * co + o) * t_out..(bi * co + o + 1) * t_out];
                        gy[o * n + bi * t_out..o * n + (bi + 1) * t_out].copy_from_slice(src);
                    }
                }
                with_grad!(*b, |d| {
                    for o in 0..co {
                        d[o] += gy[o * n..(o + 1) * n].iter().copied().sum::<T>();
                    }
                });
                let need_w = nodes[w.0].needs_grad;
                let need_x = nodes[x.0].needs_grad;
                if need_w {
                    let cols = im2col(val(*x), (bsz, ci, t_in), k, *stride, *pad, t_out);
                    with_grad!(*w, |d| {
                        gemm(co, n, ci * k, &gy, (n, 1), &cols, (1, n), T::one(), d, (ci * k, 1));
                    });
                }
                if need_x {
                    let mut dcols = vec![T::zero(); ci * k * n];
                    gemm(ci * k, co, n, val(*w), (1, ci * k), &gy, (n, 1), T::zero(), &mut dcols, (n, 1));
                    with_grad!(*x, |d| {
                        for c in 0..ci {
                            for j in 0..k {
                                let row = &dcols[(c * k + j) * n..(c * k + j + 1) * n];
                                let (lo, hi) = valid_range(j, *stride, *pad, t_in, t_out);
                                for bi in 0..bsz {
                                    let dst = &mut d[(bi * ci + c) * t_in..(bi * ci + c + 1) * t_in];
                                    let src = &row[bi * t_out..(bi + 1) * t_out];
                                    for t in lo..hi {
                                        dst[t * stride + j - pad] += src[t];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::MaxPool2 { x, left } => {
                with_grad!(*x, |d| {
                    for (o, (&l, &g)) in left.iter().zip(g).enumerate() {
                        d[2 * o + usize::from(!l)] += g;
                    }
                });
            }
            Op::Expand(x) => {
                let (bsz, c2, t) = bct("expand1d", nodes[x.0].value.shape()).expect("checked");
                let dch = c2 / 2;
                with_grad!(*x, |d| {
                    for b in 0..bsz {
                        for c in 0..dch {
                            let src = &g[(b * dch + c) * 2 * t..(b * dch + c + 1) * 2 * t];
                            for s in 0..t {
                                d[(b * c2 + c) * t + s] += src[2 * s];
                                d[(b * c2 + c + dch) * t + s] += src[2 * s + 1];
                            }
                        }
                    }
                });
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, groups, through_stats } => {
                let (bsz, c, t) = bct("norm", nodes[x.0].value.shape()).expect("checked");
                let gv = val(*gamma);
                with_grad!(*gamma, |d| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * t;
                            d[ch] += (base..base + t).map(|i| g[i] * xhat[i]).sum::<T>();
                        }
                    }
                });
                with_grad!(*beta, |d| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * t;
                            d[ch] += g[base..base + t].iter().copied().sum::<T>();
                        }
                    }
                });
                if nodes[x.0].needs_grad {
                    let n_groups = inv_std.len();
                    let group_of = |b: usize, ch: usize| match groups {
                        NormGroups::PerChannel => ch,
                        NormGroups::PerInstance => b * c + ch,
                    };
                    let mut sum_dxhat = vec![T::zero(); n_groups];
                    let mut sum_dxhat_xhat = vec![T::zero(); n_groups];
                    if *through_stats {
                        for b in 0..bsz {
                            for ch in 0..c {
                                let grp = group_of(b, ch);
                                let base = (b * c + ch) * t;
                                for i in base..base + t {
                                    let dxh = g[i] * gv[ch];
                                    sum_dxhat[grp] += dxh;
                                    sum_dxhat_xhat[grp] += dxh * xhat[i];
                                }
                            }
                        }
                    }
                    let count = T::of(match groups {
                        NormGroups::PerChannel => (bsz * t) as f64,
                        NormGroups::PerInstance => t as f64,
                    });
                    with_grad!(*x, |d| {
                        for b in 0..bsz {
                            for ch in 0..c {
                                let grp = group_of(b, ch);
                                let base = (b * c + ch) * t;
                                for i in base..base + t {
                                    let dxh = g[i] * gv[ch];
                                    d[i] += if *through_stats {
                                        inv_std[grp] / count
                                            * (count * dxh - sum_dxhat[grp] - xhat[i] * sum_dxhat_xhat[grp])
                                    } else {
                                        dxh * inv_std[grp]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.shape()[1];
                let (bsz, t) = match *nodes[i].value.shape() {
                    [_, t] => (1, t),
                    [b, _, t] => (b, t),
                    _ => unreachable!(),
                };
                with_grad!(*table, |d| {
                    for b in 0..bsz {
                        for s in 0..t {
                            let id = ids[b * t + s];
                            for c in 0..dim {
                                d[id * dim + c] += g[(b * dim + c) * t + s];
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (rows, n) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
                let m = nodes[w.0].value.shape()[0];
                with_grad!(*b, |d| {
                    for r in 0..rows {
                        for (d, &g) in d.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                            *d += g;
                        }
                    }
                });
                let (xv, wv) = (val(*x), val(*w));
                with_grad!(*w, |d| {
                    gemm(m, rows, n, g, (1, m), xv, (n, 1), T::one(), d, (n, 1));
                });
                with_grad!(*x, |d| {
                    gemm(rows, m, n, g, (m, 1), wv, (n, 1), T::one(), d, (n, 1));
                });
            }
            Op::SoftmaxXent { logits, probs, rows } => {
                let v = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::of(rows.len() as f64);
                with_grad!(*logits, |d| {
                    for &(r, tgt) in rows {
                        for c in 0..v {
                            let onehot = if c == tgt { T::one() } else { T::zero() };
                            d[r * v + c] += scale * (probs[r * v + c] - onehot);
                        }
                    }
                });
            }
            Op::LogSoftmaxPick { logits, probs, picks } => {
                let v = nodes[logits.0].value.shape()[1];
                with_grad!(*logits, |d| {
                    for &(r, tgt) in picks {
                        for c in 0..v {
                            let onehot = if c == tgt { T::one() } else { T::zero() };
                            d[r * v + c] += g[0] * (onehot - probs[r * v + c]);
                        }
                    }
                });
            }
        }
    }
}

fn slot<'g, T: Float>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

/// Gather rows of a `[V, d]` table without recording anything.
pub fn embedding_values<T: Float>(table: &Tensor<T>, ids: &[usize], batch: Option<usize>) -> Result<Tensor<T>> {
    let (vocab, dim) = match *table.shape() {
        [v, d] => (v, d),
        ref s => return Err(Error::InvalidArgument(format!("embedding: table must be [V,d], got {s:?}"))),
    };
    let bsz = batch.unwrap_or(1);
    if bsz == 0 || ids.is_empty() || ids.len() % bsz != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding: {} ids do not split into {bsz} sequences",
            ids.len()
        )));
    }
    let t = ids.len() / bsz;
    let tv = table.data();
    let mut out = vec![T::zero(); bsz * dim * t];
    for b in 0..bsz {
        for s in 0..t {
            let id = ids[b * t + s];
            if id >= vocab {
                return Err(Error::IndexOutOfRange { what: "token id", index: id, bound: vocab });
            }
            for c in 0..dim {
                out[(b * dim + c) * t + s] = tv[id * dim + c];
            }
        }
    }
    let shape = if batch.is_some() { vec![bsz, dim, t] } else { vec![dim, t] };
    Ok(Tensor { shape, data: out })
}
