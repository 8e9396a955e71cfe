//! Integrated Gradients over input embeddings and heatmap export.
//!
//! Attributions of the auto-encoder are taken with respect to the embedded
//! input, against the embedded all-PAD sequence as baseline. The scalar
//! explained at output position `p` is the log-probability of the byte the
//! model itself predicts there.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Autoencoder;
use crate::nn::ForwardMode;
use crate::padding::PAD;
use crate::tensor::{embedding_values, Float, Tape, Tensor, Var};
use crate::train::make_batch;

/// Integration points used unless configured otherwise.
pub const DEFAULT_STEPS: usize = 50;
/// Interpolation points evaluated together in one batched pass.
const CHUNK: usize = 50;

fn check_pair<T: Float>(x: &Tensor<T>, baseline: &Tensor<T>, steps: usize) -> Result<()> {
    if x.shape() != baseline.shape() {
        return Err(Error::ShapeMismatch {
            op: "integrated_gradients",
            left: x.shape().to_vec(),
            right: baseline.shape().to_vec(),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    Ok(())
}

/// `IG_i = (x_i − b_i) · (1/steps) · Σ_{s=1..steps} ∂f/∂x_i (b + (s/steps)(x − b))`,
/// given `grad_at` returning `∇f` at a point.
pub fn integrated_gradients<T: Float>(
    mut grad_at: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    baseline: &Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    check_pair(x, baseline, steps)?;
    let (xv, bv) = (x.data(), baseline.data());
    let mut acc = vec![T::zero(); x.len()];
    let mut point = baseline.clone();
    for s in 1..=steps {
        let alpha = T::of(s as f64 / steps as f64);
        for ((p, &xi), &bi) in point.data_mut().iter_mut().zip(xv).zip(bv) {
            *p = bi + alpha * (xi - bi);
        }
        let g = grad_at(&point)?;
        if g.shape() != x.shape() {
            return Err(Error::ShapeMismatch { op: "integrated_gradients", left: g.shape().to_vec(), right: x.shape().to_vec() });
        }
        acc.iter_mut().zip(g.data()).for_each(|(a, &gi)| *a += gi);
    }
    let n = T::of(steps as f64);
    let ig = acc.iter().zip(xv).zip(bv).map(|((&a, &xi), &bi)| (xi - bi) * a / n).collect();
    Tensor::from_vec(x.shape(), ig)
}

/// [`integrated_gradients`] for a scalar function recorded on a tape.
pub fn integrated_gradients_tape<T: Float>(
    mut f: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    baseline: &Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    integrated_gradients(
        |point| {
            let mut tape = Tape::new();
            let v = tape.input(point.clone());
            let out = f(&mut tape, v)?;
            let g = tape.gradients(out)?;
            Ok(g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(point.shape())))
        },
        x,
        baseline,
        steps,
    )
}

/// Attribution of one output position to every embedded input coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionAttribution {
    pub position: usize,
    /// Byte predicted at `position` for the actual input.
    pub target: usize,
    /// `[d, T]` attributions.
    pub ig: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl PositionAttribution {
    /// `|Σ IG − (f(x) − f(b))| / |f(x) − f(b)|`.
    pub fn completeness_gap(&self) -> f64 {
        let total: f64 = self.ig.iter().sum();
        let diff = self.f_input - self.f_baseline;
        (total - diff).abs() / diff.abs()
    }

    /// L1 norm over channels per input position.
    pub fn per_input(&self, slots: usize) -> Vec<f64> {
        let mut out = vec![0.0; slots];
        for (i, v) in self.ig.iter().enumerate() {
            out[i % slots] += v.abs();
        }
        out
    }
}

/// `log softmax(logits[s, :, p])` at `target` for `[S, V, T]` logits.
fn log_prob<T: Float>(logits: &Tensor<T>, s: usize, p: usize, target: usize) -> f64 {
    let (v, t) = (logits.shape()[1], logits.shape()[2]);
    let base = s * v * t + p;
    let col: Vec<f64> = (0..v).map(|c| logits.data()[base + c * t].to_f64().unwrap_or(f64::NAN)).collect();
    let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = col.iter().map(|&l| (l - m).exp()).sum();
    col[target] - m - z.ln()
}

fn run<T: Float>(model: &mut Autoencoder<T>, input: Tensor<T>, big_k: usize) -> Result<(Tape<T>, Var, Var)> {
    let mut tape = Tape::new();
    let x = tape.input(input);
    let logits = model.run_embedded(&mut tape, x, big_k, ForwardMode::Infer, None)?;
    Ok((tape, x, logits))
}

/// Integrated Gradients of selected output positions of `text` (all
/// positions when `positions` is `None`).
pub fn attribute_positions<T: Float>(
    model: &mut Autoencoder<T>,
    text: &str,
    positions: Option<&[usize]>,
    steps: usize,
) -> Result<Vec<PositionAttribution>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    if PAD >= model.config.vocab_size {
        return Err(Error::InvalidArgument("attribution needs the byte vocabulary".into()));
    }
    let batch = make_batch(&[text], &model.config)?;
    let slots = batch.slots();
    let all: Vec<usize> = (0..slots).collect();
    let positions = positions.unwrap_or(&all);
    if let Some(&bad) = positions.iter().find(|&&p| p >= slots) {
        return Err(Error::IndexOutOfRange { what: "output position", index: bad, bound: slots });
    }

    let table = &model.params.get(model.embedding.vectors).value;
    let x = embedding_values(table, &batch.ids, Some(1))?;
    let b = embedding_values(table, &vec![PAD; slots], Some(1))?;
    let d = x.shape()[1];

    // Parameters are held constant so the reverse sweeps only reach the input.
    let frozen: Vec<bool> = model.params.iter().map(|(_, p)| p.frozen).collect();
    model.params.iter_mut().for_each(|p| p.frozen = true);
    let result = (|| {
        let (tape, _, lx) = run(model, x.clone(), batch.big_k)?;
        let argmax = crate::model::argmax_ids(tape.value(lx));
        let (tape_b, _, lb) = run(model, b.clone(), batch.big_k)?;
        let mut out: Vec<PositionAttribution> = positions
            .iter()
            .map(|&p| PositionAttribution {
                position: p,
                target: argmax[p],
                ig: vec![0.0; d * slots],
                f_input: log_prob(tape.value(lx), 0, p, argmax[p]),
                f_baseline: log_prob(tape_b.value(lb), 0, p, argmax[p]),
            })
            .collect();

        let (xv, bv) = (x.data(), b.data());
        let step_ids: Vec<usize> = (1..=steps).collect();
        for chunk in step_ids.chunks(CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * xv.len());
            for &s in chunk {
                let alpha = T::of(s as f64 / steps as f64);
                data.extend(xv.iter().zip(bv).map(|(&xi, &bi)| bi + alpha * (xi - bi)));
            }
            let input = Tensor::from_vec(&[chunk.len(), d, slots], data)?;
            let (tape, xin, logits) = run(model, input, batch.big_k)?;
            let lv = tape.value(logits);
            let vocab = lv.shape()[1];
            for pa in out.iter_mut() {
                let p = pa.position;
                let mut seed = Tensor::zeros(lv.shape());
                for s in 0..chunk.len() {
                    let base = s * vocab * slots + p;
                    let logp = |c: usize| lv.data()[base + c * slots].to_f64().unwrap_or(f64::NAN);
                    let m = (0..vocab).map(logp).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..vocab).map(|c| (logp(c) - m).exp()).sum();
                    for c in 0..vocab {
                        let prob = (logp(c) - m).exp() / z;
                        let onehot = if c == pa.target { 1.0 } else { 0.0 };
                        seed.data_mut()[base + c * slots] = T::of(onehot - prob);
                    }
                }
                let grads = tape.gradients_seeded(logits, seed)?;
                let g = grads.get(xin).ok_or_else(|| Error::InvalidArgument("input received no gradient".into()))?;
                for gs in g.data().chunks(d * slots) {
                    for (acc, &gi) in pa.ig.iter_mut().zip(gs) {
                        *acc += gi.to_f64().unwrap_or(f64::NAN);
                    }
                }
            }
        }
        for pa in out.iter_mut() {
            for (i, acc) in pa.ig.iter_mut().enumerate() {
                let delta = xv[i].to_f64().unwrap_or(f64::NAN) - bv[i].to_f64().unwrap_or(f64::NAN);
                *acc = delta * *acc / steps as f64;
            }
        }
        Ok(out)
    })();
    for (p, f) in model.params.iter_mut().zip(frozen) {
        p.frozen = f;
    }
    result
}

/// Output-by-input relation matrix, channel attributions reduced by L1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    /// Rows are output positions, columns input positions.
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub text: String,
    pub baseline: String,
}

impl AttributionMatrix {
    /// Rows from attributions of every output position, in order.
    pub fn from_positions(per: &[PositionAttribution], text: &str) -> Self {
        let slots = per.len();
        AttributionMatrix {
            values: per.iter().flat_map(|p| p.per_input(slots)).collect(),
            rows: slots,
            cols: slots,
            text: text.to_string(),
            baseline: "embedded all-PAD sequence".into(),
        }
    }

    pub fn get(&self, out: usize, input: usize) -> f64 {
        self.values[out * self.cols + input]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit PGM, min-max normalized with the strongest relation
    /// black. A constant matrix renders uniformly mid-gray.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend(self.values.iter().map(|&v| {
            if hi > lo {
                (255.0 - 255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        }));
        out
    }

    /// Share of the total mass within `band` positions of the diagonal.
    pub fn diagonal_mass(&self, band: usize) -> f64 {
        let total: f64 = self.values.iter().sum();
        let mut near = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if r.abs_diff(c) <= band {
                    near += self.get(r, c);
                }
            }
        }
        near / total
    }
}

/// Relation matrix of `text` over all `2^K` output positions.
pub fn attribution_matrix<T: Float>(model: &mut Autoencoder<T>, text: &str, steps: usize) -> Result<AttributionMatrix> {
    let per = attribute_positions(model, text, None, steps)?;
    Ok(AttributionMatrix::from_positions(&per, text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl HeatmapFormat {
    /// Picks the format from a `.csv` or `.pgm` extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(HeatmapFormat::Csv),
            Some("pgm") => Ok(HeatmapFormat::Pgm),
            _ => Err(Error::InvalidArgument(format!("{}: heatmap output must end in .csv or .pgm", path.display()))),
        }
    }
}

pub fn export_heatmap(m: &AttributionMatrix, path: &Path, format: HeatmapFormat) -> Result<()> {
    if m.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attribution matrix".into()));
    }
    let bytes = match format {
        HeatmapFormat::Csv => m.to_csv().into_bytes(),
        HeatmapFormat::Pgm => m.to_pgm(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::NormMode;
    use crate::padding::{PaddingMode, BYTE_VOCAB};
    use crate::tensor::Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn linear_function_is_exact_for_any_steps() {
        for steps in [1, 2, 7, 50] {
            let ig = integrated_gradients(|_| Ok(t(&[2.0])), &t(&[3.0]), &t(&[0.0]), steps).unwrap();
            assert_eq!(ig.data(), &[6.0]);
        }
        let w = t(&[0.5, -1.5, 2.0]);
        let (x, b) = (t(&[1.0, 2.0, -3.0]), t(&[0.25, -1.0, 1.0]));
        let ig = integrated_gradients_tape(
            |tape, v| {
                let wv = tape.constant(w.clone());
                let p = tape.mul(v, wv)?;
                tape.sum(p)
            },
            &x,
            &b,
            13,
        )
        .unwrap();
        for i in 0..3 {
            let exact = w.data()[i] * (x.data()[i] - b.data()[i]);
            assert!((ig.data()[i] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn product_path_integral() {
        // f(x, y) = x·y
        let grad = |p: &Tensor<f64>| Ok(t(&[p.data()[1], p.data()[0]]));
        let (x, b) = (t(&[2.0, 3.0]), t(&[0.0, 0.0]));
        let ig = integrated_gradients(grad, &x, &b, 50).unwrap();
        let sum: f64 = ig.data().iter().sum();
        assert!((sum - 6.0).abs() / 6.0 < 0.02);
        assert!((ig.data()[0] - 3.0).abs() / 3.0 < 0.02);
        let fine = integrated_gradients(grad, &x, &b, 5000).unwrap();
        assert!((fine.data()[0] - 3.0).abs() < 1e-2 && (fine.data()[1] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn zero_where_input_equals_baseline() {
        let x = t(&[1.0, 5.0, -2.0]);
        let b = t(&[1.0, 0.0, -2.0]);
        let ig = integrated_gradients(|p| Ok(p.clone()), &x, &b, 10).unwrap();
        assert_eq!(ig.data()[0], 0.0);
        assert_eq!(ig.data()[2], 0.0);
        let same = integrated_gradients(|p| Ok(p.clone()), &x, &x, 10).unwrap();
        assert!(same.data().iter().all(|&v| v == 0.0));
        assert!(integrated_gradients(|p| Ok(p.clone()), &x, &t(&[1.0]), 10).is_err());
        assert!(integrated_gradients(|p| Ok(p.clone()), &x, &b, 0).is_err());
    }

    fn model() -> Autoencoder<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            d: 4,
            big_k: 3,
            r: 1,
            vocab_size: BYTE_VOCAB,
            norm: NormMode::None,
            padding: PaddingMode::BalancedFixed,
        };
        Autoencoder::new(cfg, &mut Rng::new(7)).unwrap()
    }

    #[test]
    fn model_attributions_match_generic_implementation() {
        let mut m = model();
        let batched = attribute_positions(&mut m, "abc", Some(&[2]), 7).unwrap().remove(0);

        let batch = make_batch(&["abc"], &m.config).unwrap();
        let table = &m.params.get(m.embedding.vectors).value;
        let x = embedding_values(table, &batch.ids, Some(1)).unwrap();
        let b = embedding_values(table, &[PAD; 8], Some(1)).unwrap();
        let target = batched.target;
        let mut mm = m.clone();
        let reference = integrated_gradients_tape(
            |tape, v| {
                let logits = mm.run_embedded(tape, v, 3, ForwardMode::Infer, None)?;
                let flat = tape.positions_major(logits)?;
                tape.log_softmax_pick(flat, &[(2, target)])
            },
            &x,
            &b,
            7,
        )
        .unwrap();
        for (a, r) in batched.ig.iter().zip(reference.data()) {
            assert!((a - r).abs() < 1e-10);
        }
        assert!(m.params.iter().all(|(_, p)| !p.frozen));
    }

    #[test]
    fn completeness_improves_with_steps() {
        let mut m = model();
        let mut gap = |steps| attribute_positions(&mut m, "hey", Some(&[1]), steps).unwrap()[0].completeness_gap();
        let (g10, g50, g500) = (gap(10), gap(50), gap(500));
        assert!(g500 < g50 && g50 < g10, "{g10} {g50} {g500}");
        assert!(g500 < 0.01);
    }

    #[test]
    fn matrix_shape_and_position_checks() {
        let mut m = model();
        let mat = attribution_matrix(&mut m, "ab", 5).unwrap();
        assert_eq!((mat.rows, mat.cols, mat.values.len()), (8, 8, 64));
        assert!(mat.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(attribute_positions(&mut m, "ab", Some(&[8]), 5).is_err());
    }

    fn matrix(values: &[f64], n: usize) -> AttributionMatrix {
        AttributionMatrix { values: values.to_vec(), rows: n, cols: n, text: String::new(), baseline: String::new() }
    }

    #[test]
    fn pgm_mapping() {
        let pgm = matrix(&[0.0, 1.0, 1.0, 0.0], 2).to_pgm();
        assert_eq!(&pgm[..11], b"P5\n2 2\n255\n");
        assert_eq!(&pgm[11..], &[255, 0, 0, 255]);
        assert_eq!(&matrix(&[3.0; 4], 2).to_pgm()[11..], &[128; 4]);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let vals = [0.1, 1.0 / 3.0, 2e-300, 12345.678];
        let m = matrix(&vals, 2);
        let parsed: Vec<f64> =
            m.to_csv().lines().flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect();
        assert_eq!(parsed, vals);
    }

    #[test]
    fn export_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = matrix(&[0.0, 1.0, 1.0, 0.0], 2);
        let csv = dir.path().join("h.csv");
        export_heatmap(&m, &csv, HeatmapFormat::from_path(&csv).unwrap()).unwrap();
        assert_eq!(std::fs::read_to_string(&csv).unwrap(), "0,1\n1,0\n");
        let pgm = dir.path().join("h.pgm");
        export_heatmap(&m, &pgm, HeatmapFormat::Pgm).unwrap();
        assert_eq!(std::fs::read(&pgm).unwrap().len(), 15);
        assert!(HeatmapFormat::from_path(Path::new("x.png")).is_err());
        assert!(export_heatmap(&m, &dir.path().join("missing/x.csv"), HeatmapFormat::Csv).is_err());
    }
}
