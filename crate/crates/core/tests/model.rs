use seedsmith_core::decode::{greedy_search, TransformerScorer};
use seedsmith_core::model::checkpoint::{from_bytes, to_bytes};
use seedsmith_core::model::{
    evaluate_loss, load_checkpoint, save_checkpoint, smoothed_loss_and_grad, train, AnyModel,
    Example, ModelConfig, ModelState, TrainConfig,
};
use seedsmith_core::subword::{EOS, PAD};
use seedsmith_core::Error;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        ff_dim: 16,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        max_positions: 16,
        vocab_size: vocab,
        label_smoothing: 0.1,
    }
}

fn batch() -> Vec<Example> {
    vec![
        Example::new(&[5, 6, 5], &[6, 5]),
        Example::new(&[6], &[5, 5, 6, 3]),
        Example::new(&[3, 5, 6, 6, 4], &[6]),
    ]
}

/// Central differences over every parameter of a tiny high-precision model.
pub fn max_gradient_error(state: &mut ModelState<f64>, batch: &[Example], eps: f64) -> f64 {
    let (_, grads) = state.loss_and_grads(batch, eps, None).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..state.params.tensors.len() {
        for j in 0..state.params.tensors[t].data.len() {
            let orig = state.params.tensors[t].data[j];
            state.params.tensors[t].data[j] = orig + h;
            let up = state.batch_loss(batch, eps).unwrap().mean();
            state.params.tensors[t].data[j] = orig - h;
            let down = state.batch_loss(batch, eps).unwrap().mean();
            state.params.tensors[t].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.data[t][j];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut state = ModelState::<f64>::new(tiny(7), 3).unwrap();
    let err = max_gradient_error(&mut state, &batch(), 0.1);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn rows_are_normalized_distributions() {
    let state = ModelState::<f64>::new(tiny(7), 1).unwrap();
    for out in state.forward(&batch()).unwrap() {
        for row in out.chunks(7) {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn batch_order_does_not_matter() {
    let state = ModelState::<f64>::new(tiny(7), 1).unwrap();
    let b = batch();
    let fwd = state.forward(&b).unwrap();
    let rev: Vec<Example> = b.iter().rev().cloned().collect();
    let bwd = state.forward(&rev).unwrap();
    for (i, out) in fwd.iter().enumerate() {
        let other = &bwd[b.len() - 1 - i];
        for (x, y) in out.iter().zip(other) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let state = ModelState::<f64>::new(tiny(7), 2).unwrap();
    let a = Example::new(&[5, 6], &[5, 6, 5, 6]);
    let mut b = a.clone();
    // Changing decoder input position 2 must leave rows 0..=1 alone.
    b.tgt_in[2] = 3;
    let fa = &state.forward(&[a]).unwrap()[0];
    let fb = &state.forward(&[b]).unwrap()[0];
    for r in 0..2 {
        for j in 0..7 {
            assert!((fa[r * 7 + j] - fb[r * 7 + j]).abs() < 1e-12);
        }
    }
    assert!((0..7).any(|j| (fa[2 * 7 + j] - fb[2 * 7 + j]).abs() > 1e-9));
}

#[test]
fn trailing_pad_leaves_loss_unchanged() {
    let state = ModelState::<f64>::new(tiny(7), 4).unwrap();
    let plain = Example::new(&[5, 6, 5], &[6, 5]);
    let mut padded = plain.clone();
    padded.src.extend([PAD, PAD]);
    padded.tgt_in.extend([PAD, PAD, PAD]);
    padded.tgt_out.extend([PAD, PAD, PAD]);
    let a = state.batch_loss(&[plain], 0.1).unwrap();
    let b = state.batch_loss(&[padded], 0.1).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert!((a.loss_sum - b.loss_sum).abs() < 1e-12);
}

#[test]
fn overlong_sequences_are_input_errors() {
    let state = ModelState::<f64>::new(tiny(7), 4).unwrap();
    let long = Example::new(&[5; 20], &[6]);
    assert!(matches!(state.forward(&[long]), Err(Error::Input(_))));
}

#[test]
fn loss_identities() {
    // eps = 0 is the negative log-likelihood.
    let mut logits = vec![0.3f64, -1.2, 2.0, 0.7];
    let s = smoothed_loss_and_grad(&mut logits.clone(), &[2], 4, 0.0, Some(0), false);
    assert!((s.mean() - s.mean_nll()).abs() < 1e-10);
    // Uniform predictor costs ln V whatever the target and eps.
    for eps in [0.0, 0.1, 0.5] {
        for target in 1..4 {
            let s = smoothed_loss_and_grad(&mut [0.0f64; 4], &[target], 4, eps, Some(0), false);
            assert!((s.mean() - 4f64.ln()).abs() < 1e-9);
        }
    }
    // V = 2, no PAD, p = [0.9, 0.1], target 0, eps 0.1.
    logits = vec![0.9f64.ln(), 0.1f64.ln()];
    let s = smoothed_loss_and_grad(&mut logits, &[0], 2, 0.1, None, false);
    assert!((s.mean() - 0.21522).abs() < 1e-4, "{}", s.mean());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut state = ModelState::<f64>::new(tiny(7), 5).unwrap();
    let before = state.params.clone();
    let tc = TrainConfig {
        peak_lr: 0.0,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    state.train_step(&batch(), &tc).unwrap();
    assert_eq!(state.params, before);
    assert_eq!(state.step, 1);
}

fn toy_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_tokens_per_batch: 64,
        epochs,
        peak_lr: 3e-3,
        warmup_steps: 10,
        clip_norm: 1.0,
        rng_seed: 9,
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let mut cfg = tiny(7);
    cfg.dropout = 0.1;
    let run = || {
        let mut s = ModelState::<f64>::new(cfg.clone(), 11).unwrap();
        let reports = train(&mut s, &batch(), &toy_train_config(3), |_, _| Ok(())).unwrap();
        (s, reports)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_keep_the_initial_state() {
    let mut s = ModelState::<f64>::new(tiny(7), 12).unwrap();
    let fresh = s.clone();
    let reports = train(&mut s, &batch(), &toy_train_config(0), |_, _| Ok(())).unwrap();
    assert!(reports.is_empty());
    assert_eq!(s, fresh);
}

#[test]
fn single_pair_is_memorized() {
    let mut cfg = tiny(9);
    cfg.d_model = 16;
    cfg.ff_dim = 32;
    cfg.label_smoothing = 0.0;
    let target = [7, 5, 8, 6, 5];
    let data = vec![Example::new(&[8, 7], &target)];
    let mut s = ModelState::<f32>::new(cfg, 13).unwrap();
    train(&mut s, &data, &toy_train_config(150), |_, _| Ok(())).unwrap();
    let ctx = s.encode_source(&data[0].src).unwrap();
    let h = greedy_search(&TransformerScorer { model: &s }, &ctx, 10, 1.0).unwrap();
    assert_eq!(h.tokens, target);
    assert!(h.finished);
    let nll = evaluate_loss(&s, &data, 64, 0.0).unwrap().mean();
    assert!(nll < 0.05, "{nll}");
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let state = ModelState::<f64>::new(tiny(7), 14).unwrap();
    let ex = Example::new(&[5, 6, 4], &[6, 5, 6]);
    let full = &state.forward(std::slice::from_ref(&ex)).unwrap()[0];
    let src = state.encode_source(&ex.src).unwrap();
    let mut cache = state.start_decoding();
    for (t, &tok) in ex.tgt_in.iter().enumerate() {
        let lp = state.decode_step(&src, &mut cache, tok).unwrap();
        for j in 0..7 {
            assert!((lp[j] - full[t * 7 + j]).abs() < 1e-10);
        }
    }
    assert_eq!(ex.tgt_out.last(), Some(&EOS));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut s = ModelState::<f32>::new(tiny(7), 15).unwrap();
    train(&mut s, &batch(), &toy_train_config(2), |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&s, &path).unwrap();
    match load_checkpoint(&path).unwrap() {
        AnyModel::F32(back) => {
            assert_eq!(back, s);
            let bits = |m: &ModelState<f32>| -> Vec<u32> {
                m.params.tensors.iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect()
            };
            assert_eq!(bits(&back), bits(&s));
        }
        AnyModel::F64(_) => panic!("wrong precision"),
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(to_bytes(&s).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let s = ModelState::<f64>::new(tiny(7), 16).unwrap();
    let bytes = to_bytes(&s).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(from_bytes(&version), Err(Error::Format(_))));
}

#[test]
fn vocab_mismatch_is_a_shape_error() {
    let s = ModelState::<f32>::new(tiny(7), 17).unwrap();
    let m = from_bytes(&to_bytes(&s).unwrap()).unwrap();
    assert!(m.check_vocab(7).is_ok());
    assert!(matches!(m.check_vocab(8), Err(Error::Shape(_))));
}
