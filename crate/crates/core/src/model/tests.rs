use super::*;
use crate::nn::{Conv1dParams, ForwardMode};
use crate::padding::{pad, pad_balanced, tokenize_bytes, WordVocab, PAD};
use crate::tensor::gradcheck::grad_check_params;
use crate::tensor::{Fill, ParamStore, Rng, Tape};

fn config(n: usize, d: usize, big_k: usize, r: usize, norm: NormMode) -> ModelConfig {
    ModelConfig { n_layers: n, d, big_k, r, vocab_size: BYTE_VOCAB, norm, padding: PaddingMode::BalancedFixed }
}

fn byte_batch(texts: &[&str], big_k: usize, mode: PaddingMode) -> Batch {
    let seqs: Vec<_> = texts.iter().map(|t| pad(&tokenize_bytes(t), big_k, mode, PAD).unwrap()).collect();
    Batch::new(&seqs).unwrap()
}

#[test]
fn config_validation() {
    assert!(config(2, 8, 4, 1, NormMode::Batch).validate().is_ok());
    assert!(config(3, 8, 4, 1, NormMode::Batch).validate().is_err());
    assert!(config(0, 8, 4, 1, NormMode::Batch).validate().is_err());
    assert!(config(2, 8, 4, 4, NormMode::Batch).validate().is_err());
    assert_eq!(config(8, 256, 10, 2, NormMode::Batch).latent_size(), 1024);
}

#[test]
fn reference_scale_shapes() {
    let mut m = Autoencoder::<f32>::new(config(2, 256, 10, 2, NormMode::None), &mut Rng::new(0)).unwrap();
    let b = byte_batch(&["hello"], 10, PaddingMode::BalancedFixed);
    let mut tape = Tape::new();
    let z = m.encode(&mut tape, &b, ForwardMode::Infer).unwrap();
    assert_eq!(tape.shape(z), &[1, 256, 4]);
    let out = m.forward(&mut tape, &b, ForwardMode::Infer, None).unwrap();
    assert_eq!(tape.shape(out.logits), &[1, 258, 1024]);
}

#[test]
fn desk_latent_shape() {
    let mut m = Autoencoder::<f32>::new(config(2, 32, 6, 1, NormMode::Batch), &mut Rng::new(0)).unwrap();
    let b = byte_batch(&["ab", "cde"], 6, PaddingMode::BalancedFixed);
    let mut tape = Tape::new();
    let z = m.encode(&mut tape, &b, ForwardMode::Train).unwrap();
    assert_eq!(tape.shape(z), &[2, 32, 2]);
    assert_eq!(tape.value(z).len() / 2, 64);
}

#[test]
fn every_recursive_application_gets_its_own_statistics() {
    let cfg = config(2, 8, 10, 2, NormMode::Batch);
    let mut m = Autoencoder::<f32>::new(cfg, &mut Rng::new(0)).unwrap();
    let b = byte_batch(&["hello", "world"], 10, PaddingMode::BalancedFixed);
    let mut tape = Tape::new();
    m.forward(&mut tape, &b, ForwardMode::Train, None).unwrap();
    let rec = &m.encoder.recursive[0].norm1;
    assert_eq!(rec.stats.len(), 8);
    assert!(rec.stats.values().all(|s| s.updates == 1));
    let gammas: std::collections::BTreeSet<_> = rec.stats.values().map(|s| s.gamma).collect();
    assert_eq!(gammas.len(), 8);
    let means: Vec<_> = rec.stats.values().map(|s| s.running_mean.clone()).collect();
    assert!(means.windows(2).all(|w| w[0] != w[1]));
    assert!(m.decoder.up.norm.stats.values().all(|s| s.updates == 1));
    assert_eq!(m.encoder.prefix[0].norm1.stats.len(), 1);
}

#[test]
fn recursive_weights_are_shared() {
    let names = |k: usize| {
        let m = Autoencoder::<f64>::new(config(2, 4, k, 1, NormMode::None), &mut Rng::new(0)).unwrap();
        m.params.iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>()
    };
    assert_eq!(names(3), names(7));

    let mut m = Autoencoder::<f64>::new(config(2, 4, 4, 1, NormMode::None), &mut Rng::new(0)).unwrap();
    let b = byte_batch(&["abc"], 4, PaddingMode::BalancedFixed);
    let run = |m: &mut Autoencoder<f64>| {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &b, ForwardMode::Infer, None).unwrap();
        tape.value(out.logits).clone()
    };
    let before = run(&mut m);
    let w = m.encoder.recursive[0].conv1.weight;
    m.params.get_mut(w).value.data_mut()[0] += 1.0;
    assert_ne!(before, run(&mut m));
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let mut m = Autoencoder::<f64>::new(config(2, 8, 3, 1, NormMode::None), &mut Rng::new(0)).unwrap();
    let out = m.decoder.output.clone();
    for id in [out.weight, out.bias] {
        m.params.get_mut(id).value.fill_zero();
    }
    let b = byte_batch(&["ab", "c"], 3, PaddingMode::BalancedFixed);
    let mut tape = Tape::new();
    let o = m.forward(&mut tape, &b, ForwardMode::Infer, None).unwrap();
    let loss = tape.value(o.loss).item();
    assert!((loss - 258f64.ln()).abs() < 1e-12);
    assert!((loss - 5.5530).abs() < 1e-4);
}

#[test]
fn byte_error_counts_real_positions_only() {
    let mut m = Autoencoder::<f64>::new(config(2, 8, 3, 1, NormMode::None), &mut Rng::new(0)).unwrap();
    let out = m.decoder.output.clone();
    m.params.get_mut(out.weight).value.fill_zero();
    m.params.get_mut(out.bias).value.data_mut()[usize::from(b'A')] = 50.0;
    // "AAA" + EOS: only EOS is mispredicted; the four pad slots are wrong too but excluded
    let b = byte_batch(&["AAA"], 3, PaddingMode::BalancedFixed);
    let mut tape = Tape::new();
    let o = m.forward(&mut tape, &b, ForwardMode::Infer, None).unwrap();
    assert_eq!((o.errors, o.real), (1, 4));
    assert_eq!(o.byte_error(), 0.25);
}

fn tiny() -> ModelConfig {
    ModelConfig { n_layers: 2, d: 4, big_k: 3, r: 1, vocab_size: 8, norm: NormMode::None, padding: PaddingMode::BalancedFixed }
}

#[test]
fn perfect_logits_give_zero_loss() {
    let mut m = Autoencoder::<f64>::new(tiny(), &mut Rng::new(0)).unwrap();
    let out = m.decoder.output.clone();
    m.params.get_mut(out.weight).value.fill_zero();
    m.params.get_mut(out.bias).value.data_mut()[3] = 100.0;
    let b = Batch::new(&[pad_balanced(&[3; 8], 3, 7).unwrap()]).unwrap();
    let mut tape = Tape::new();
    let o = m.forward(&mut tape, &b, ForwardMode::Infer, None).unwrap();
    assert!(tape.value(o.loss).item() < 1e-30);
    assert_eq!(o.byte_error(), 0.0);
}

#[test]
fn tiny_model_end_to_end_grad_check() {
    let mut m = Autoencoder::<f64>::new(tiny(), &mut Rng::new(5)).unwrap();
    let b = Batch::new(&[pad_balanced(&[1, 2, 3], 3, 7).unwrap(), pad_balanced(&[4, 5, 6, 0, 1], 3, 7).unwrap()]).unwrap();
    let mut store = m.params.clone();
    let err = grad_check_params(
        &mut store,
        |tape, params| {
            m.params = params.clone();
            Ok(m.forward(tape, &b, ForwardMode::Infer, None)?.loss)
        },
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn instance_norm_output_independent_of_batch() {
    let mut m = Autoencoder::<f32>::new(config(2, 8, 4, 1, NormMode::Instance), &mut Rng::new(3)).unwrap();
    let full = byte_batch(&["abc", "hello", "xy"], 4, PaddingMode::BalancedFixed);
    let alone = byte_batch(&["hello"], 4, PaddingMode::BalancedFixed);
    let mut tape = Tape::new();
    let a = m.forward(&mut tape, &full, ForwardMode::Train, None).unwrap();
    let b = m.forward(&mut tape, &alone, ForwardMode::Train, None).unwrap();
    let per = 258 * 16;
    assert_eq!(&tape.value(a.logits).data()[per..2 * per], tape.value(b.logits).data());
}

#[test]
fn length_is_checked() {
    let mut m = Autoencoder::<f32>::new(config(2, 8, 4, 1, NormMode::None), &mut Rng::new(0)).unwrap();
    let b = byte_batch(&["abc"], 3, PaddingMode::BalancedFixed);
    assert!(m.forward(&mut Tape::new(), &b, ForwardMode::Infer, None).is_err());
}

#[test]
fn nearest_mode_keys_statistics_by_length() {
    let mut cfg = config(2, 8, 5, 1, NormMode::Batch);
    cfg.padding = PaddingMode::RightNearest;
    let mut m = Autoencoder::<f32>::new(cfg, &mut Rng::new(0)).unwrap();
    for texts in [&["abcdefghij", "klmnopqrst"][..], &["ab", "cd"]] {
        let b = byte_batch(texts, 5, PaddingMode::RightNearest);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &b, ForwardMode::Train, None).unwrap();
        assert_eq!(tape.shape(out.logits)[2], b.slots());
    }
    let rec = &m.encoder.recursive[0].norm1;
    assert_eq!(rec.stats.len(), cfg.recursive_keys().len());
    let used: Vec<_> = rec.stats.iter().filter(|(_, s)| s.updates > 0).map(|(k, _)| (k.step, k.k)).collect();
    // 11 tokens run at k=4 (three halvings), 3 tokens at k=2 (one halving)
    assert_eq!(used, [(0, 2), (0, 4), (1, 4), (2, 4)]);
}

#[test]
fn param_count_matches_instantiated_models() {
    assert_eq!(Conv1dParams::param_count(2, 2, 3), 14);
    for n in [2, 4, 6] {
        for norm in [NormMode::Batch, NormMode::Instance, NormMode::None] {
            for padding in [PaddingMode::BalancedFixed, PaddingMode::RightNearest] {
                let cfg = ModelConfig { n_layers: n, d: 3, big_k: 4, r: 1, vocab_size: 11, norm, padding };
                let m = Autoencoder::<f32>::new(cfg, &mut Rng::new(0)).unwrap();
                assert_eq!(cfg.param_count(), m.params.trainable_count(), "{cfg:?}");
            }
        }
    }
}

#[test]
fn param_count_scales_with_depth() {
    let group = |n: usize, prefix: &str| {
        let m = Autoencoder::<f32>::new(config(n, 6, 4, 1, NormMode::Batch), &mut Rng::new(0)).unwrap();
        m.params.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(_, p)| p.value.len()).sum::<usize>()
    };
    for prefix in ["encoder.prefix", "encoder.recursive", "decoder.postfix"] {
        assert_eq!(group(4, prefix), 2 * group(2, prefix), "{prefix}");
        assert_eq!(group(8, prefix), 2 * group(4, prefix), "{prefix}");
    }
    // the decoder's recursive group keeps its channel-doubling block and
    // gains one residual block per two extra layers
    assert_eq!(group(2, "decoder.recursive"), 0);
    assert_eq!(group(6, "decoder.recursive"), 2 * group(4, "decoder.recursive"));
}

#[test]
fn reference_param_count_is_stable() {
    assert_eq!(ModelConfig::default().param_count(), 6_706_690);
}

fn word_model(d: usize, norm: NormMode) -> NliModel<f64> {
    let words: Vec<String> = ["the", "cat", "sat", "dog", "ran", "a"].iter().map(|s| s.to_string()).collect();
    let n = words.len();
    let vectors = Tensor::new(&[n, d], Fill::Normal { mean: 0.0, std: 1.0 }, &mut Rng::new(1)).unwrap();
    let cfg = WordConfig { n_layers: 2, d_w: 0, norm, hidden: 8 };
    NliModel::new(cfg, WordVocab::new(words), vectors, &mut Rng::new(2)).unwrap()
}

fn toks(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

#[test]
fn word_encoder_shapes_and_layout() {
    let mut m = word_model(5, NormMode::None);
    let p = m.pad_sentence(&toks("the cat sat")).unwrap();
    assert_eq!(p.positions, [0, 16, 32]);
    let long: Vec<String> = (0..70).map(|i| ["the", "cat"][i % 2].to_string()).collect();
    let p = m.pad_sentence(&long).unwrap();
    assert_eq!(p.original_length, 64);
    assert!(p.ids.iter().all(|&id| id != m.vocab.pad_id()));
    assert!(m.pad_sentence::<String>(&[]).is_err());

    let mut tape = Tape::new();
    let v = m.sentence_vectors(&mut tape, &[toks("the"), long, toks("a dog ran")], ForwardMode::Infer).unwrap();
    assert_eq!(tape.shape(v), &[3, 5]);
    assert_eq!(m.config.param_count(), m.params.trainable_count());
}

#[test]
fn bow_examples() {
    let words = vec!["x".to_string(), "y".to_string()];
    let vectors = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let cfg = WordConfig { n_layers: 2, d_w: 0, norm: NormMode::None, hidden: 4 };
    let m = NliModel::<f64>::new(cfg, WordVocab::new(words), vectors, &mut Rng::new(0)).unwrap();
    assert_eq!(m.bow_embed(&["x"]).unwrap().data(), &[1.0, 0.0]);
    assert_eq!(m.bow_embed(&["x", "y"]).unwrap().data(), &[0.5, 0.5]);
    assert_eq!(m.bow_embed(&["x", "zz"]).unwrap().data(), &[0.5, 0.0]);
    assert!(m.bow_embed::<&str>(&[]).is_err());
}

#[test]
fn bow_is_permutation_invariant() {
    let m = word_model(7, NormMode::None);
    let a = m.bow_embed(&toks("the cat sat a")).unwrap();
    let b = m.bow_embed(&toks("sat a the cat")).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn ensemble_examples() {
    let e1 = Tensor::<f64>::from_f64(&[2], &[1.0, 0.0]).unwrap();
    let e2 = Tensor::<f64>::from_f64(&[2], &[0.0, 1.0]).unwrap();
    assert_eq!(ensemble_embed(&e1, &e2).unwrap().data(), &[1.0, 1.0]);
    let zero = Tensor::<f64>::zeros(&[2]);
    assert_eq!(ensemble_embed(&zero, &e2).unwrap(), e2);
    let v = Tensor::<f64>::from_f64(&[2], &[0.25, -1.5]).unwrap();
    let u = Tensor::<f64>::from_f64(&[2], &[2.0, 0.5]).unwrap();
    let x = ensemble_embed(&v, &u).unwrap();
    assert_eq!([x.data()[0] - u.data()[0], x.data()[1] - u.data()[1]], [0.25, -1.5]);
    assert!(ensemble_embed(&v, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn nli_features() {
    let mut tape = Tape::<f64>::new();
    let vp = tape.constant(Tensor::from_f64(&[1, 3], &[1.0, -2.0, 3.0]).unwrap());
    let f = NliHead::features(&mut tape, vp, vp).unwrap();
    assert_eq!(tape.shape(f), &[1, 12]);
    assert_eq!(&tape.value(f).data()[6..9], &[0.0, 0.0, 0.0]);
    assert_eq!(&tape.value(f).data()[9..], &[1.0, 4.0, 9.0]);
}

#[test]
fn nli_head_grad_check() {
    let mut store = ParamStore::<f64>::new();
    let head = NliHead::new(&mut store, 3, 5, &mut Rng::new(4));
    let vp = Tensor::new(&[2, 3], Fill::Normal { mean: 0.0, std: 1.0 }, &mut Rng::new(5)).unwrap();
    let vh = Tensor::new(&[2, 3], Fill::Normal { mean: 0.0, std: 1.0 }, &mut Rng::new(6)).unwrap();
    let err = grad_check_params(
        &mut store,
        |tape, params| {
            let (a, b) = (tape.constant(vp.clone()), tape.constant(vh.clone()));
            let mut ctx = crate::nn::Ctx::new(tape, params, ForwardMode::Train);
            let logits = head.forward(&mut ctx, a, b)?;
            tape.softmax_xent(logits, &[0, 2], None)
        },
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
    let err = crate::tensor::gradcheck::grad_check(
        |tape, v| {
            let mut ctx = crate::nn::Ctx::new(tape, &store, ForwardMode::Train);
            let logits = head.forward(&mut ctx, v[0], v[1])?;
            tape.softmax_xent(logits, &[1, 0], None)
        },
        &[vp.clone(), vh.clone()],
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn nli_forward_scores_predictions() {
    let mut m = word_model(4, NormMode::Batch);
    let mut tape = Tape::new();
    let out = m
        .forward(&mut tape, &[toks("the cat"), toks("a dog")], &[toks("the cat sat"), toks("ran")], &[0, 1], ForwardMode::Train)
        .unwrap();
    assert_eq!(tape.shape(out.logits), &[2, 3]);
    assert_eq!(out.predictions.len(), 2);
    assert!(m.forward(&mut tape, &[toks("a")], &[], &[0], ForwardMode::Train).is_err());
}
