use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

fn cfg(encoder: EncoderVariant) -> ModelConfig {
    ModelConfig {
        num_concepts: 6,
        embed_dim: 3,
        lstm_hidden: 4,
        score_dim: 3,
        dropout_rate: 0.0,
        encoder,
    }
}

fn model(encoder: EncoderVariant, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(cfg(encoder), &mut rng).unwrap()
}

fn episode() -> Episode {
    Episode {
        history: vec![
            HistoryItem { concept: 5, mastery: 0.3 },
            HistoryItem { concept: 1, mastery: 0.8 },
        ],
        candidates: vec![0, 2, 3, 4],
        targets: vec![4, 1],
        path_len: 3,
    }
}

fn encode_values(m: &Model, candidates: &[usize], opts: ForwardOptions) -> Matrix {
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = encode(&mut tape, &b, &m.config, candidates, opts, &mut rng).unwrap();
    tape.value(e).clone()
}

#[test]
fn widths_follow_variant() {
    for (v, w) in [
        (EncoderVariant::Combined, 6),
        (EncoderVariant::AttentionOnly, 3),
        (EncoderVariant::MlpOnly, 3),
    ] {
        let m = model(v, 1);
        assert_eq!(encode_values(&m, &[1, 2], ForwardOptions::eval()).shape(), (2, w));
        assert_eq!(m.params.attention.is_some(), v.uses_attention());
        assert_eq!(m.params.mlp.is_some(), v.uses_mlp());
    }
}

#[test]
fn single_candidate_attention_is_value_row() {
    let m = model(EncoderVariant::AttentionOnly, 2);
    let got = encode_values(&m, &[4], ForwardOptions::eval());
    let x = Matrix::row(m.params.embedding.row_slice(4).to_vec());
    let want = x.matmul(&m.params.attention.as_ref().unwrap().value).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-15);
}

#[test]
fn identity_mlp_adds_set_mean() {
    let m = model(EncoderVariant::MlpOnly, 3);
    let opts = ForwardOptions {
        identity_mlp: true,
        ..ForwardOptions::eval()
    };
    let cands = [0, 3, 5];
    let got = encode_values(&m, &cands, opts);
    let e = &m.params.embedding;
    for (r, &c) in cands.iter().enumerate() {
        for k in 0..3 {
            let mean = cands.iter().map(|&j| e.get(j, k)).sum::<f64>() / 3.0;
            assert!((got.get(r, k) - (e.get(c, k) + mean)).abs() < 1e-15);
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    for v in [EncoderVariant::Combined, EncoderVariant::AttentionOnly, EncoderVariant::MlpOnly] {
        let m = model(v, 4);
        let a = encode_values(&m, &[0, 2, 3, 5], ForwardOptions::eval());
        let b = encode_values(&m, &[5, 0, 3, 2], ForwardOptions::eval());
        for (rb, ra) in [(0, 3), (1, 0), (2, 2), (3, 1)] {
            for k in 0..a.cols() {
                assert!((a.get(ra, k) - b.get(rb, k)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn encoder_rejects_bad_candidate_sets() {
    let m = model(EncoderVariant::Combined, 5);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = ForwardOptions::eval();
    assert!(encode(&mut tape, &b, &m.config, &[], opts, &mut rng).is_err());
    assert!(encode(&mut tape, &b, &m.config, &[1, 1], opts, &mut rng).is_err());
    assert!(matches!(
        encode(&mut tape, &b, &m.config, &[9], opts, &mut rng),
        Err(Error::UnknownConcept { id: 9, .. })
    ));
}

#[test]
fn history_state() {
    let m = model(EncoderVariant::Combined, 6);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape).unwrap();

    let empty = init_state(&mut tape, &b, &m.config, &[]).unwrap();
    assert_eq!(tape.value(empty.h), &Matrix::zeros(1, 4));
    assert_eq!(tape.value(empty.c), &Matrix::zeros(1, 4));

    let item = HistoryItem { concept: 2, mastery: 0.6 };
    let one = init_state(&mut tape, &b, &m.config, &[item]).unwrap();
    let mut xy = m.params.embedding.row_slice(2).to_vec();
    xy.push(0.6);
    let input = tape.leaf(Matrix::row(xy).matmul(&m.params.history_proj).unwrap()).unwrap();
    let zero = LstmState {
        h: tape.leaf(Matrix::zeros(1, 4)).unwrap(),
        c: tape.leaf(Matrix::zeros(1, 4)).unwrap(),
    };
    let manual = lstm_step(&mut tape, &b.lstm, input, zero).unwrap();
    assert!(tape.value(one.h).max_abs_diff(tape.value(manual.h)) < 1e-15);
    assert!(tape.value(one.c).max_abs_diff(tape.value(manual.c)) < 1e-15);

    let h1 = HistoryItem { concept: 0, mastery: 0.2 };
    let h2 = HistoryItem { concept: 3, mastery: 0.9 };
    let ab = init_state(&mut tape, &b, &m.config, &[h1, h2]).unwrap();
    let ba = init_state(&mut tape, &b, &m.config, &[h2, h1]).unwrap();
    assert!(tape.value(ab.h).max_abs_diff(tape.value(ba.h)) > 1e-6);

    let bad = HistoryItem { concept: 0, mastery: 1.5 };
    assert!(init_state(&mut tape, &b, &m.config, &[bad]).is_err());
}

/// Plain-loop evaluation of the additive scorer.
fn scorer_oracle(p: &ScorerParams, h: &[f64], enc: &Matrix, xt: &[f64]) -> Vec<f64> {
    let a = p.out.rows();
    (0..enc.rows())
        .map(|j| {
            (0..a)
                .map(|k| {
                    let mut z = p.bias.get(0, k);
                    z += (0..h.len()).map(|i| h[i] * p.state_w.get(i, k)).sum::<f64>();
                    z += (0..enc.cols()).map(|i| enc.get(j, i) * p.cand_w.get(i, k)).sum::<f64>();
                    z += (0..xt.len()).map(|i| xt[i] * p.target_w.get(i, k)).sum::<f64>();
                    p.out.get(k, 0) * z.tanh()
                })
                .sum()
        })
        .collect()
}

#[test]
fn scorer_matches_loop_oracle() {
    let m = model(EncoderVariant::Combined, 7);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = encode(&mut tape, &b, &m.config, &[1, 4, 5], ForwardOptions::eval(), &mut rng).unwrap();
    let xt = target_embedding(&mut tape, &b, &[0, 2]).unwrap();
    let hv = vec![0.3, -0.2, 0.7, -0.5];
    let h = tape.leaf(Matrix::row(hv.clone())).unwrap();
    let s = step_scores(&mut tape, &b, h, enc, xt).unwrap();

    let e = &m.params.embedding;
    let xt_v: Vec<f64> = (0..3).map(|k| (e.get(0, k) + e.get(2, k)) / 2.0).collect();
    assert!(Matrix::row(xt_v.clone()).max_abs_diff(&tape.value(xt).clone()) < 1e-15);
    let want = scorer_oracle(&m.params.scorer, &hv, tape.value(enc), &xt_v);
    for (j, w) in want.iter().enumerate() {
        assert!((tape.value(s).get(j, 0) - w).abs() < 1e-12);
    }
}

#[test]
fn zero_scorer_gives_uniform_steps() {
    let mut m = model(EncoderVariant::Combined, 8);
    m.params.scorer.out = Matrix::zeros(3, 1);
    let s = m.greedy(&episode()).unwrap();
    for (i, p) in s.step_probs.iter().enumerate() {
        assert!((p - 1.0 / (4 - i) as f64).abs() < 1e-15);
    }
    // Uniform ties resolve to the smallest available position.
    assert_eq!(s.positions, vec![0, 1, 2]);
}

#[test]
fn single_choice_has_zero_logprob() {
    let m = model(EncoderVariant::Combined, 9);
    let ep = Episode {
        history: vec![],
        candidates: vec![3],
        targets: vec![3],
        path_len: 1,
    };
    let s = m.greedy(&ep).unwrap();
    assert_eq!(s.concepts, vec![3]);
    assert_eq!(s.step_logprobs, vec![0.0]);
}

#[test]
fn path_probabilities_sum_to_one() {
    for v in [EncoderVariant::Combined, EncoderVariant::AttentionOnly, EncoderVariant::MlpOnly] {
        let m = model(v, 10);
        let ep = episode();
        let mut total = 0.0;
        crate::simulator::for_each_arrangement(&[0, 1, 2, 3], 3, |path| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = m.decode(&ep, DecodeMode::Replay(path), &mut rng)?;
            assert_eq!(s.positions, path);
            total += s.log_prob().exp();
            Ok(())
        })
        .unwrap();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }
}

#[test]
fn greedy_is_deterministic_argmax() {
    let m = model(EncoderVariant::Combined, 11);
    let ep = episode();
    let a = m.greedy(&ep).unwrap();
    let b = m.greedy(&ep).unwrap();
    assert_eq!(a, b);
    for (i, dist) in a.step_distributions.iter().enumerate() {
        let best = dist.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(dist[a.positions[i]], best);
        for prev in &a.positions[..i] {
            assert_eq!(dist[*prev], 0.0);
        }
    }
}

#[test]
fn zero_kt_head_predicts_half() {
    let mut m = model(EncoderVariant::Combined, 12);
    m.params.kt.out_w = Matrix::zeros(3, 1);
    m.params.kt.out_b = Matrix::zeros(1, 1);
    let s = m.greedy(&episode()).unwrap();
    assert_eq!(s.kt_preds, vec![0.5; 3]);
}

#[test]
fn sampled_paths_never_repeat() {
    let m = model(EncoderVariant::Combined, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ep = episode();
    ep.path_len = 4;
    for _ in 0..300 {
        let s = m.decode(&ep, DecodeMode::Sample, &mut rng).unwrap();
        let mut sorted = s.positions.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }
}

#[test]
fn sampling_matches_first_step_distribution() {
    let m = model(EncoderVariant::Combined, 14);
    let mut ep = episode();
    ep.path_len = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probs = m.greedy(&ep).unwrap().step_distributions[0].clone();
    let draws = 20_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[m.decode(&ep, DecodeMode::Sample, &mut rng).unwrap().positions[0]] += 1;
    }
    for j in 0..4 {
        let p = probs[j];
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = counts[j] as f64 / draws as f64;
        assert!((freq - p).abs() < 4.0 * sd, "pos {j}: {freq} vs {p}");
    }
}

#[test]
fn replay_rejects_invalid_paths() {
    let m = model(EncoderVariant::Combined, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ep = episode();
    assert!(m.decode(&ep, DecodeMode::Replay(&[0, 0, 1]), &mut rng).is_err());
    assert!(m.decode(&ep, DecodeMode::Replay(&[0, 1]), &mut rng).is_err());
    assert!(m.decode(&ep, DecodeMode::Replay(&[0, 1, 7]), &mut rng).is_err());
    let mut long = ep.clone();
    long.path_len = 5;
    assert!(m.decode(&long, DecodeMode::Greedy, &mut rng).is_err());
}

fn replay_loss(config: &ModelConfig, nodes: &[Node], tape: &mut Tape) -> Result<Node> {
    let b = BoundParams::from_nodes(config.encoder.uses_attention(), config.encoder.uses_mlp(), nodes.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = roll_path(tape, &b, config, &episode(), DecodeMode::Replay(&[2, 0, 3]), ForwardOptions::training(), &mut rng)?;
    let lp = tape.sum_scalars(&r.logprob_nodes)?;
    let lp = tape.scale(lp, 0.7)?;
    let mut terms = vec![lp];
    for (i, k) in r.kt_nodes.iter().enumerate() {
        terms.push(tape.bce(*k, 0.2 + 0.25 * i as f64, PROB_EPS)?);
    }
    tape.sum_scalars(&terms)
}

#[test]
fn every_tensor_receives_gradient() {
    for v in [EncoderVariant::Combined, EncoderVariant::AttentionOnly, EncoderVariant::MlpOnly] {
        let m = model(v, 16);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape).unwrap();
        let loss = replay_loss(&m.config, b.nodes(), &mut tape).unwrap();
        let g = tape.backward(loss).unwrap();
        for ((name, _), node) in m.params.named_tensors().iter().zip(b.nodes()) {
            assert!(g.get(*node).squared_norm() > 0.0, "{v:?} {name} has no gradient");
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for v in [EncoderVariant::Combined, EncoderVariant::AttentionOnly, EncoderVariant::MlpOnly] {
        let mut config = cfg(v);
        config.dropout_rate = 0.5;
        let m = Model::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let report = grad_check(|t, n| replay_loss(&config, n, t), &m.params.tensors(), 1e-5).unwrap();
        // Entries with gradients near 1e-8 sit at the roundoff floor of
        // central differences, so bound absolute error tightly.
        assert!(report.max_abs_error < 1e-9, "{v:?}: {report:?}");
        assert!(report.max_rel_error < 1e-3, "{v:?}: {report:?}");
    }
}

#[test]
fn dropout_only_in_training() {
    let mut config = cfg(EncoderVariant::MlpOnly);
    config.dropout_rate = 0.5;
    let m = Model::new(config, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    let a = encode_values(&m, &[0, 1, 2], ForwardOptions::eval());
    let b = encode_values(&m, &[0, 1, 2], ForwardOptions::eval());
    assert_eq!(a, b);
    let t = encode_values(&m, &[0, 1, 2], ForwardOptions::training());
    assert!(a.max_abs_diff(&t) > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for v in [EncoderVariant::Combined, EncoderVariant::AttentionOnly, EncoderVariant::MlpOnly] {
        let m = model(v, 19);
        let text = checkpoint_to_string(&m.config, &m.params).unwrap();
        let (c, p) = checkpoint_from_str(&text).unwrap();
        assert_eq!(c, m.config);
        for (x, y) in p.tensors().iter().zip(m.params.tensors()) {
            let xb: Vec<u64> = x.as_slice().iter().map(|f| f.to_bits()).collect();
            let yb: Vec<u64> = y.as_slice().iter().map(|f| f.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(checkpoint_to_string(&c, &p).unwrap(), text);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let m = model(EncoderVariant::Combined, 20);
    save_checkpoint(&path, &m.config, &m.params).unwrap();
    let (c, p) = load_checkpoint(&path).unwrap();
    assert_eq!(Model { config: c, params: p }, m);
}

#[test]
fn checkpoint_rejects_foreign_versions() {
    let m = model(EncoderVariant::Combined, 21);
    let text = checkpoint_to_string(&m.config, &m.params).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = serde_json::json!(99);
    assert!(matches!(
        checkpoint_from_str(&v.to_string()),
        Err(Error::CheckpointVersion(99))
    ));
}

#[test]
fn config_validation() {
    let mut c = cfg(EncoderVariant::Combined);
    assert!(c.validate().is_ok());
    c.dropout_rate = 1.0;
    assert!(c.validate().is_err());
    let mut c = cfg(EncoderVariant::Combined);
    c.embed_dim = 0;
    assert!(c.validate().is_err());
    let d = ModelConfig::default();
    assert_eq!((d.embed_dim, d.lstm_hidden, d.score_dim, d.dropout_rate), (64, 64, 64, 0.5));
}
