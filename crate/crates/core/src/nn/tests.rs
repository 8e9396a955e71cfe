use super::*;
use crate::tensor::gradcheck::grad_check;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, Fill::Normal { mean: 0.0, std: 1.0 }, &mut Rng::new(seed)).unwrap()
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::new(tape.shape(y), Fill::Uniform(0.5, 1.5), &mut Rng::new(seed))?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Direct-loop cross-correlation with zero padding, independent of the im2col path.
fn conv_oracle(x: &[f64], (b, ci, t): (usize, usize, usize), w: &[f64], co: usize, k: usize, bias: &[f64], stride: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let to = t / stride;
    let mut out = vec![0.0; b * co * to];
    for bi in 0..b {
        for o in 0..co {
            for s in 0..to {
                let mut acc = bias[o];
                for i in 0..ci {
                    for j in 0..k {
                        let src = (s * stride + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w[(o * ci + i) * k + j] * x[(bi * ci + i) * t + src as usize];
                        }
                    }
                }
                out[(bi * co + o) * to + s] = acc;
            }
        }
    }
    out
}

#[test]
fn conv1d_hand_example() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t64(&[1, 1, 3], &[1.0, 0.0, -1.0]));
    let b = tape.constant(t64(&[1], &[0.0]));
    let y = tape.conv1d(x, w, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[-2.0, -2.0, -2.0, 3.0]);
    let y2 = tape.conv1d(x, w, b, 2).unwrap();
    assert_eq!(tape.shape(y2), &[1, 2]);
}

#[test]
fn conv1d_identity_kernel_is_exact_identity() {
    let x = random(&[3, 5, 16], 1);
    let mut w = vec![0.0; 5 * 5 * 3];
    for c in 0..5 {
        w[(c * 5 + c) * 3 + 1] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(t64(&[5, 5, 3], &w));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.conv1d(xv, wv, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn conv1d_matches_direct_loop_oracle() {
    for (stride, k) in [(1, 3), (2, 3), (1, 1)] {
        let (b, ci, co, t) = (2, 3, 4, 8);
        let x = random(&[b, ci, t], 3);
        let w = random(&[co, ci, k], 4);
        let bias = random(&[co], 5);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
        let y = tape.conv1d(xv, wv, bv, stride).unwrap();
        let expect = conv_oracle(x.data(), (b, ci, t), w.data(), co, k, bias.data(), stride);
        for (a, e) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv1d(x, w, b, 1), Err(Error::ChannelMismatch { .. })));
    let x = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(tape.conv1d(x, w, b, 2).is_err());
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(t64(&[1, 4], &[3.0, 1.0, 4.0, 1.0]));
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    let m = tape.input(t64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let ym = tape.maxpool2(m).unwrap();
    assert_eq!(tape.value(ym).data(), &[2.0, 4.0]);

    let c = tape.input(t64(&[1, 4], &[5.0; 4]));
    let yc = tape.maxpool2(c).unwrap();
    assert_eq!(tape.value(yc).data(), &[5.0, 5.0]);
    let l = tape.sum(yc).unwrap();
    let g = tape.gradients(l).unwrap();
    assert_eq!(g.get(c).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);

    let odd = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(tape.maxpool2(odd).is_err());
}

#[test]
fn expand_example_and_duplication() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
    let y = tape.expand1d(x).unwrap();
    assert_eq!(tape.shape(y), &[2, 4]);
    assert_eq!(tape.value(y).data(), &[1., 5., 2., 6., 3., 7., 4., 8.]);

    let src = random(&[2, 3, 5], 8);
    let s = tape.constant(src.clone());
    let cc = tape.concat_channels(s, s).unwrap();
    let e = tape.expand1d(cc).unwrap();
    let ev = tape.value(e).data();
    for i in 0..src.len() {
        assert_eq!(ev[2 * i], src.data()[i]);
        assert_eq!(ev[2 * i + 1], src.data()[i]);
    }
    assert_eq!(tape.value(e).len(), src.len() * 2);

    let odd = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.expand1d(odd).is_err());
}

fn one_norm(mode: NormMode, channels: usize) -> (ParamStore<f64>, NormLayer<f64>) {
    let mut store = ParamStore::new();
    let layer = NormLayer::new(&mut store, "n", channels, mode, &[StepKey::new(0, 0), StepKey::new(1, 0)]);
    (store, layer)
}

#[test]
fn batch_norm_hand_example() {
    let (store, mut layer) = one_norm(NormMode::Batch, 1);
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[3, 1, 1], &[1.0, 2.0, 3.0]));
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    let y = layer.forward(&mut ctx, x, StepKey::new(0, 0)).unwrap();
    // mean 2, population variance 2/3
    let s = (2.0f64 / 3.0 + 1e-5).sqrt();
    let expect = [-1.0 / s, 0.0, 1.0 / s];
    for (a, e) in tape.value(y).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
    assert!((expect[2] - 1.2247).abs() < 1e-4);
}

#[test]
fn batch_norm_affine_inversion() {
    let (mut store, mut layer) = one_norm(NormMode::Batch, 2);
    let x = random(&[4, 2, 3], 2);
    let key = StepKey::new(0, 0);
    let st = layer.stats_for(key).unwrap().clone();
    // batch statistics by hand
    let mut mean = [0.0; 2];
    let mut var = [0.0; 2];
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|b| (0..3).map(move |t| (b, t))).map(|(b, t)| x.data()[(b * 2 + c) * 3 + t]).collect();
        mean[c] = vals.iter().sum::<f64>() / 12.0;
        var[c] = vals.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / 12.0;
    }
    store.set_value(st.gamma, t64(&[2], &[(var[0] + 1e-5).sqrt(), (var[1] + 1e-5).sqrt()])).unwrap();
    store.set_value(st.beta, t64(&[2], &mean)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::BatchCalibrated);
    let y = layer.forward(&mut ctx, xv, key).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() < 1e-10);
    }
}

#[test]
fn batch_norm_infer_after_momentum_one_matches_train() {
    let (store, mut layer) = one_norm(NormMode::Batch, 3);
    layer.set_momentum(1.0);
    let x = random(&[5, 3, 4], 3);
    let key = StepKey::new(1, 0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let train = {
        let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
        layer.forward(&mut ctx, xv, key).unwrap()
    };
    let infer = {
        let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Infer);
        layer.forward(&mut ctx, xv, key).unwrap()
    };
    for (a, b) in tape.value(train).data().iter().zip(tape.value(infer).data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_errors() {
    let (store, mut layer) = one_norm(NormMode::Batch, 1);
    let mut tape = Tape::new();
    let single = tape.constant(t64(&[1, 1, 3], &[1.0, 2.0, 3.0]));
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    assert!(layer.forward(&mut ctx, single, StepKey::new(0, 0)).is_err());
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Infer);
    assert!(matches!(layer.forward(&mut ctx, single, StepKey::new(0, 0)), Err(Error::StatsNotReady(_))));
}

#[test]
fn batch_norm_train_output_is_standardized() {
    for seed in 0..5 {
        let (store, mut layer) = one_norm(NormMode::Batch, 4);
        let x = Tensor::<f64>::new(&[8, 4, 16], Fill::Normal { mean: 3.0, std: 2.5 }, &mut Rng::new(seed)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
        let y = layer.forward(&mut ctx, xv, StepKey::new(0, 0)).unwrap();
        let yv = tape.value(y).data();
        for c in 0..4 {
            let vals: Vec<f64> = (0..8).flat_map(|b| yv[(b * 4 + c) * 16..(b * 4 + c + 1) * 16].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn step_keys_never_alias() {
    let (store, mut layer) = one_norm(NormMode::Batch, 2);
    let mut tape = Tape::new();
    let a = tape.constant(random(&[4, 2, 3], 1));
    let b = tape.constant(Tensor::<f64>::new(&[4, 2, 3], Fill::Normal { mean: 5.0, std: 3.0 }, &mut Rng::new(2)).unwrap());
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    layer.forward(&mut ctx, a, StepKey::new(0, 0)).unwrap();
    layer.forward(&mut ctx, b, StepKey::new(1, 0)).unwrap();
    let s0 = layer.stats_for(StepKey::new(0, 0)).unwrap();
    let s1 = layer.stats_for(StepKey::new(1, 0)).unwrap();
    assert_ne!(s0.running_mean, s1.running_mean);
    assert_ne!(s0.gamma, s1.gamma);
    assert_eq!((s0.updates, s1.updates), (1, 1));
}

#[test]
fn instance_norm_examples() {
    let (store, mut layer) = one_norm(NormMode::Instance, 1);
    let key = StepKey::new(0, 0);
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[1, 1, 2], &[1.0, 3.0]));
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    let y = layer.forward(&mut ctx, x, key).unwrap();
    let s = (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(y).data()[0] + 1.0 / s).abs() < 1e-12);
    assert!((tape.value(y).data()[1] - 1.0 / s).abs() < 1e-12);

    let c = tape.constant(t64(&[1, 1, 3], &[4.0, 4.0, 4.0]));
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Infer);
    let yc = layer.forward(&mut ctx, c, key).unwrap();
    assert!(tape.value(yc).data().iter().all(|v| v.abs() < 1e-12));

    let short = tape.constant(t64(&[1, 1, 1], &[4.0]));
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Infer);
    assert!(layer.forward(&mut ctx, short, key).is_err());
}

#[test]
fn instance_norm_is_batch_independent() {
    let (store, mut layer) = one_norm(NormMode::Instance, 3);
    let key = StepKey::new(0, 0);
    let batch = random(&[4, 3, 5], 9);
    let alone = Tensor::from_vec(&[1, 3, 5], batch.data()[2 * 15..3 * 15].to_vec()).unwrap();
    let mut tape = Tape::new();
    let (bv, av) = (tape.constant(batch), tape.constant(alone));
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    let yb = layer.forward(&mut ctx, bv, key).unwrap();
    let ya = layer.forward(&mut ctx, av, key).unwrap();
    assert_eq!(&tape.value(yb).data()[2 * 15..3 * 15], tape.value(ya).data());
}

#[test]
fn residual_block_with_zero_convs_is_relu() {
    let mut store = ParamStore::<f64>::new();
    let key = StepKey::new(0, 0);
    let mut blk = ResidualBlock::new(&mut store, "b", 3, NormMode::Batch, &[key], &mut Rng::new(1));
    for id in [blk.conv1.weight, blk.conv1.bias, blk.conv2.weight, blk.conv2.bias] {
        let shape = store.get(id).value.shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let x = random(&[2, 3, 4], 4);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    let y = blk.forward(&mut ctx, xv, key).unwrap();
    assert_eq!(tape.shape(y), x.shape());
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, e.max(0.0));
    }
}

#[test]
fn embedding_examples() {
    let mut store = ParamStore::<f64>::new();
    let tab = EmbeddingTable { vectors: store.add("e", t64(&[2, 2], &[1., 2., 3., 4.])), vocab: 2, dim: 2 };
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    let y = tab.lookup(&mut ctx, &[1, 0], None).unwrap();
    // [d, len]: column 0 is row 1, column 1 is row 0
    assert_eq!(tape.value(y).data(), &[3., 1., 4., 2.]);

    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    assert!(matches!(tab.lookup(&mut ctx, &[2], None), Err(Error::IndexOutOfRange { .. })));

    // repeated id: gradient rows add up
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    let y = tab.lookup(&mut ctx, &[1, 1, 0], None).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.get(tab.vectors).grad.data(), &[1., 1., 2., 2.]);
}

#[test]
fn frozen_embedding_gets_no_grad() {
    let mut store = ParamStore::<f64>::new();
    let tab = EmbeddingTable::frozen(&mut store, "g", t64(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Train);
    let y = tab.lookup(&mut ctx, &[1, 0, 1], None).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert!(store.get(tab.vectors).grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[2.0, 3.0]));
    let eye = tape.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let y = tape.linear(x, eye, zero).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
    let w = tape.constant(t64(&[1, 2], &[1., 1.]));
    let b = tape.constant(t64(&[1], &[1.]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.linear(bad, w, b).is_err());
}

#[test]
fn softmax_xent_examples() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
    let loss = tape.softmax_xent(l, &[0], None).unwrap();
    assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    let l = tape.constant(t64(&[1, 2], &[30.0, -30.0]));
    let loss = tape.softmax_xent(l, &[0], None).unwrap();
    assert!(tape.value(loss).item() < 1e-20);

    let good = tape.constant(t64(&[2, 3], &[5.0, 0.0, 0.0, -50.0, 50.0, 0.0]));
    let masked = tape.softmax_xent(good, &[0, 0], Some(&[true, false])).unwrap();
    let first = tape.constant(t64(&[1, 3], &[5.0, 0.0, 0.0]));
    let alone = tape.softmax_xent(first, &[0], None).unwrap();
    assert_eq!(tape.value(masked).item(), tape.value(alone).item());

    assert!(tape.softmax_xent(good, &[0, 0], Some(&[false, false])).is_err());
    assert!(tape.softmax_xent(good, &[0, 3], None).is_err());
}

const SHAPES: [(usize, usize, usize); 3] = [(1, 2, 4), (2, 3, 8), (3, 2, 2)];

#[test]
fn every_layer_passes_grad_check() {
    for (si, &(b, c, t)) in SHAPES.iter().enumerate() {
        let seed = 100 + si as u64 * 10;
        let x = random(&[b, c, t], seed);
        let w3 = random(&[4, c, 3], seed + 1);
        let w1 = random(&[5, c, 1], seed + 2);
        let bias4 = random(&[4], seed + 3);
        let bias5 = random(&[5], seed + 4);
        let gamma = Tensor::new(&[c], Fill::Uniform(0.5, 1.5), &mut Rng::new(seed + 5)).unwrap();
        let beta = random(&[c], seed + 6);

        let check = |name: &str, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]| {
            let err = grad_check(|tp, v| f(tp, v), inputs, 1e-4).unwrap();
            assert!(err < 1e-5, "{name} on {:?}: {err}", (b, c, t));
        };

        check("conv1d", &|tp, v| { let y = tp.conv1d(v[0], v[1], v[2], 1)?; project(tp, y, 1) }, &[x.clone(), w3.clone(), bias4.clone()]);
        if t % 2 == 0 {
            check("conv1d stride 2", &|tp, v| { let y = tp.conv1d(v[0], v[1], v[2], 2)?; project(tp, y, 1) }, &[x.clone(), w3.clone(), bias4.clone()]);
            check("maxpool", &|tp, v| { let y = tp.maxpool2(v[0])?; project(tp, y, 1) }, &[x.clone()]);
        }
        check("conv1d kernel 1", &|tp, v| { let y = tp.conv1d(v[0], v[1], v[2], 1)?; project(tp, y, 1) }, &[x.clone(), w1.clone(), bias5.clone()]);
        if c % 2 == 0 {
            check("expand", &|tp, v| { let y = tp.expand1d(v[0])?; project(tp, y, 1) }, &[x.clone()]);
        }
        if b * t >= 2 {
            check("batch_norm", &|tp, v| { let (y, _, _) = tp.batch_norm(v[0], v[1], v[2], None, 1e-5)?; project(tp, y, 1) }, &[x.clone(), gamma.clone(), beta.clone()]);
        }
        let rm = vec![0.3; c];
        let rv = vec![1.7; c];
        check("batch_norm running stats", &|tp, v| { let (y, _, _) = tp.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?; project(tp, y, 1) }, &[x.clone(), gamma.clone(), beta.clone()]);
        // with two samples per instance the output is nearly a step function
        // and central differences are dominated by truncation error
        if t >= 4 {
            check("instance_norm", &|tp, v| { let y = tp.instance_norm(v[0], v[1], v[2], 1e-5)?; project(tp, y, 1) }, &[x.clone(), gamma.clone(), beta.clone()]);
        }
        let ids: Vec<usize> = (0..b * t).map(|i| (i * 7 + si) % 5).collect();
        check("embedding", &|tp, v| { let y = tp.embedding(v[0], &ids, Some(b))?; project(tp, y, 1) }, &[random(&[5, c], seed + 7)]);
        let xl = random(&[b, c * t], seed + 8);
        check("linear", &|tp, v| { let y = tp.linear(v[0], v[1], v[2])?; project(tp, y, 1) }, &[xl.clone(), random(&[3, c * t], seed + 9), random(&[3], seed + 10)]);
        let targets: Vec<usize> = (0..b * t).map(|i| i % c).collect();
        let mask: Vec<bool> = (0..b * t).map(|i| i % 3 != 1).collect();
        check("positions_major + masked xent", &|tp, v| { let p = tp.positions_major(v[0])?; tp.softmax_xent(p, &targets, Some(&mask)) }, &[x.clone()]);
        let picks: Vec<(usize, usize)> = (0..b * t).step_by(2).map(|i| (i, (i + 1) % c)).collect();
        check("log_softmax_pick", &|tp, v| { let p = tp.positions_major(v[0])?; tp.log_softmax_pick(p, &picks) }, &[x.clone()]);
    }
}

#[test]
fn residual_block_passes_grad_check() {
    let mut store = ParamStore::<f64>::new();
    let key = StepKey::new(0, 0);
    let mut blk = ResidualBlock::new(&mut store, "b", 3, NormMode::Batch, &[key], &mut Rng::new(11));
    // conv biases feeding a batch norm have an identically zero gradient, so
    // any relative comparison there only measures finite-difference noise
    for id in [blk.conv1.bias, blk.conv2.bias] {
        store.get_mut(id).frozen = true;
    }
    let x = random(&[2, 3, 4], 12);
    let err = crate::tensor::gradcheck::grad_check_params(
        &mut store,
        |tape, params| {
            let xv = tape.constant(x.clone());
            let mut ctx = Ctx::new(tape, params, ForwardMode::BatchCalibrated);
            let y = blk.forward(&mut ctx, xv, key)?;
            project(tape, y, 13)
        },
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn calibration_accumulates_exact_population_statistics() {
    let (store, mut layer) = one_norm(NormMode::Batch, 2);
    let key = StepKey::new(0, 0);
    let parts = [random(&[3, 2, 4], 1), random(&[5, 2, 4], 2)];
    for p in &parts {
        let mut tape = Tape::new();
        let xv = tape.constant(p.clone());
        let mut ctx = Ctx::new(&mut tape, &store, ForwardMode::Infer);
        ctx.calib = Some(CalibCursor { target: 0, visited: 0 });
        layer.forward(&mut ctx, xv, key).unwrap();
    }
    assert_eq!(layer.finish_calibration(), 1);
    let st = layer.stats_for(key).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = parts
            .iter()
            .flat_map(|p| {
                let b = p.shape()[0];
                (0..b).flat_map(move |bi| p.data()[(bi * 2 + c) * 4..(bi * 2 + c + 1) * 4].to_vec())
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((st.running_mean[c] - m).abs() < 1e-12);
        assert!((st.running_var[c] - v).abs() < 1e-12);
    }
}
