use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(out * weights)` with fixed random weights, so every output entry
/// carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Node, seed: u64) -> Result<Node> {
    let (r, c) = tape.value(out).shape();
    let w = tape.leaf(Matrix::uniform(r, c, 1.0, &mut rng(seed)))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

#[test]
fn matmul_hand_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
    let ones = tape.leaf(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).unwrap();
    let c = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(c).as_slice(), &[3.0, 7.0]);

    let i2 = tape.leaf(Matrix::identity(2)).unwrap();
    let ia = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(ia), tape.value(a));

    assert!(matches!(tape.matmul(ones, ones), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let a = Matrix::uniform(3, 4, 1.0, &mut r);
    let b = Matrix::uniform(4, 2, 1.0, &mut r);
    let report = grad_check(
        |t, p| {
            let c = t.matmul(p[0], p[1])?;
            weighted_sum(t, c, 7)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::new();
    let zeros = tape.leaf(Matrix::row(vec![0.0; 3])).unwrap();
    let p = tape.masked_softmax(zeros, &BoolMask::all_allowed(3)).unwrap();
    for v in tape.value(p).as_slice() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let s = tape.leaf(Matrix::row(vec![1.0, 2.0, 3.0])).unwrap();
    let mask = BoolMask::from_allowed(vec![true, true, false]);
    let p = tape.masked_softmax(s, &mask).unwrap();
    let e1 = 1f64.exp();
    let e2 = 2f64.exp();
    let got = tape.value(p).as_slice();
    assert!((got[0] - e1 / (e1 + e2)).abs() < 1e-15);
    assert!((got[0] - 0.26894).abs() < 1e-5);
    assert!((got[1] - 0.73106).abs() < 1e-5);
    assert_eq!(got[2], 0.0);

    let only = BoolMask::from_allowed(vec![false, true, false]);
    let p = tape.masked_softmax(s, &only).unwrap();
    assert_eq!(tape.value(p).as_slice(), &[0.0, 1.0, 0.0]);

    let none = BoolMask::from_allowed(vec![false; 3]);
    assert!(matches!(tape.masked_softmax(s, &none), Err(Error::Precondition(_))));
}

#[test]
fn masked_entries_get_zero_gradient() {
    let mut tape = Tape::new();
    let s = tape.leaf(Matrix::row(vec![0.3, -1.2, 2.0, 0.7])).unwrap();
    let mask = BoolMask::from_allowed(vec![true, false, true, false]);
    let p = tape.masked_softmax(s, &mask).unwrap();
    let loss = weighted_sum(&mut tape, p, 3).unwrap();
    let g = tape.backward(loss).unwrap().get(s);
    assert_eq!(g.as_slice()[1], 0.0);
    assert_eq!(g.as_slice()[3], 0.0);
    assert!(g.as_slice()[0] != 0.0 && g.as_slice()[2] != 0.0);
}

#[test]
fn bce_examples() {
    let mut tape = Tape::new();
    let p = tape.constant_scalar(1.0 - PROB_EPS).unwrap();
    let l = tape.bce(p, 1.0, PROB_EPS).unwrap();
    assert!(tape.scalar(l) < 1e-6);

    let half = tape.constant_scalar(0.5).unwrap();
    for y in [0.0, 0.2, 0.5, 1.0] {
        let l = tape.bce(half, y, PROB_EPS).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    // -(0.3 ln 0.8 + 0.7 ln 0.2), evaluated independently.
    let p = tape.constant_scalar(0.8).unwrap();
    let l = tape.bce(p, 0.3, PROB_EPS).unwrap();
    assert!((tape.scalar(l) - 1.193_549_604_098_133).abs() < 1e-12);

    assert!(matches!(tape.bce(p, 1.5, PROB_EPS), Err(Error::Domain(_))));
    assert!(matches!(tape.bce(p, -0.1, PROB_EPS), Err(Error::Domain(_))));
}

#[test]
fn grad_check_on_sum_of_squares() {
    let x = Matrix::row(vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone()).unwrap();
    let loss = tape.squared_norm(leaf).unwrap();
    assert_eq!(tape.backward(loss).unwrap().get(leaf).as_slice(), &[2.0, 4.0]);

    let report = grad_check(|t, p| t.squared_norm(p[0]), &[x], 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_rejects_non_finite_loss() {
    let x = Matrix::row(vec![1.0]);
    let out = grad_check(
        |t, p| {
            let big = t.scale(p[0], 1e300)?;
            t.mul(big, big)
        },
        &[x],
        1e-5,
    );
    assert!(matches!(out, Err(Error::NonFinite(_))));
}

fn lstm_leaves(p: &[Node]) -> (LstmWeights, LstmState, Node) {
    let w = LstmWeights {
        w_input: p[0],
        w_hidden: p[1],
        bias: p[2],
    };
    (w, LstmState { h: p[3], c: p[4] }, p[5])
}

#[test]
fn lstm_zero_weights_give_zero_hidden() {
    let (inp, hid) = (3, 2);
    let mut tape = Tape::new();
    let w = LstmWeights {
        w_input: tape.leaf(Matrix::zeros(inp, 4 * hid)).unwrap(),
        w_hidden: tape.leaf(Matrix::zeros(hid, 4 * hid)).unwrap(),
        bias: tape.leaf(Matrix::zeros(1, 4 * hid)).unwrap(),
    };
    let state = LstmState {
        h: tape.leaf(Matrix::zeros(1, hid)).unwrap(),
        c: tape.leaf(Matrix::zeros(1, hid)).unwrap(),
    };
    let x = tape.leaf(Matrix::row(vec![0.5, -3.0, 9.0])).unwrap();
    let next = lstm_step(&mut tape, &w, x, state).unwrap();
    assert!(tape.value(next.h).as_slice().iter().all(|v| *v == 0.0));
    assert!(tape.value(next.c).as_slice().iter().all(|v| *v == 0.0));

    let bad = tape.leaf(Matrix::row(vec![1.0, 2.0])).unwrap();
    assert!(matches!(lstm_step(&mut tape, &w, bad, state), Err(Error::Dimension { .. })));
}

#[test]
fn lstm_matches_scalar_hand_trace() {
    // One input, one hidden unit; gates in i, f, g, o order.
    let wx = [0.1, -0.2, 0.3, 0.4];
    let wh = [0.05, 0.15, -0.25, 0.35];
    let b = [0.01, 1.0, -0.02, 0.03];
    let (x, h0, c0) = (0.7, -0.3, 0.2);

    let z: Vec<f64> = (0..4).map(|k| x * wx[k] + h0 * wh[k] + b[k]).collect();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (i, f, g, o) = (sig(z[0]), sig(z[1]), z[2].tanh(), sig(z[3]));
    let c1 = f * c0 + i * g;
    let h1 = o * c1.tanh();

    let mut tape = Tape::new();
    let w = LstmWeights {
        w_input: tape.leaf(Matrix::row(wx.to_vec())).unwrap(),
        w_hidden: tape.leaf(Matrix::row(wh.to_vec())).unwrap(),
        bias: tape.leaf(Matrix::row(b.to_vec())).unwrap(),
    };
    let state = LstmState {
        h: tape.leaf(Matrix::scalar(h0)).unwrap(),
        c: tape.leaf(Matrix::scalar(c0)).unwrap(),
    };
    let xin = tape.leaf(Matrix::scalar(x)).unwrap();
    let next = lstm_step(&mut tape, &w, xin, state).unwrap();
    assert!((tape.scalar(next.h) - h1).abs() < 1e-15);
    assert!((tape.scalar(next.c) - c1).abs() < 1e-15);
}

#[test]
fn lstm_gradient_matches_finite_differences() {
    let (inp, hid) = (3, 4);
    let mut r = rng(11);
    let params = vec![
        Matrix::uniform(inp, 4 * hid, 0.8, &mut r),
        Matrix::uniform(hid, 4 * hid, 0.8, &mut r),
        Matrix::uniform(1, 4 * hid, 0.8, &mut r),
        Matrix::uniform(1, hid, 0.8, &mut r),
        Matrix::uniform(1, hid, 0.8, &mut r),
        Matrix::uniform(1, inp, 0.8, &mut r),
    ];
    let report = grad_check(
        |t, p| {
            let (w, s, x) = lstm_leaves(p);
            let s1 = lstm_step(t, &w, x, s)?;
            let s2 = lstm_step(t, &w, x, s1)?;
            let both = t.concat_cols(s2.h, s2.c)?;
            weighted_sum(t, both, 5)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

/// Randomized finite-difference sweep over every differentiable op.
#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let rows = r.random_range(1..4);
        let cols = r.random_range(1..5);
        let inner = r.random_range(1..4);
        let a = Matrix::uniform(rows, cols, 1.0, &mut r);
        let b = Matrix::uniform(rows, cols, 1.0, &mut r);
        let m = Matrix::uniform(cols, inner, 1.0, &mut r);
        let row = Matrix::uniform(1, cols, 1.0, &mut r);
        let pos = a.map(|v| v.abs() + 0.5);
        let prob = Matrix::scalar(r.random_range(0.05..0.95));
        let target = r.random_range(0.0..=1.0);
        let keep: Vec<f64> = (0..rows * cols)
            .map(|_| if r.random_bool(0.5) { 2.0 } else { 0.0 })
            .collect();
        let mut mask = BoolMask::from_allowed((0..rows * cols).map(|_| r.random_bool(0.6)).collect());
        mask.allow(0);
        let gather: Vec<usize> = (0..4).map(|_| r.random_range(0..rows)).collect();
        let width = r.random_range(1..=cols);
        let start = r.random_range(0..=cols - width);
        let pick = r.random_range(0..rows * cols);

        type Case<'a> = (&'a str, Vec<Matrix>, Box<dyn Fn(&mut Tape, &[Node]) -> Result<Node> + 'a>);
        let cases: Vec<Case> = vec![
            ("add", vec![a.clone(), b.clone()], Box::new(|t, p| t.add(p[0], p[1]))),
            ("mul", vec![a.clone(), b.clone()], Box::new(|t, p| t.mul(p[0], p[1]))),
            ("matmul", vec![a.clone(), m.clone()], Box::new(|t, p| t.matmul(p[0], p[1]))),
            ("add_row", vec![a.clone(), row.clone()], Box::new(|t, p| t.add_row(p[0], p[1]))),
            ("scale", vec![a.clone()], Box::new(|t, p| t.scale(p[0], -1.7))),
            ("sigmoid", vec![a.clone()], Box::new(|t, p| t.sigmoid(p[0]))),
            ("tanh", vec![a.clone()], Box::new(|t, p| t.tanh(p[0]))),
            ("log", vec![pos.clone()], Box::new(|t, p| t.log(p[0], PROB_EPS))),
            ("concat", vec![a.clone(), b.clone()], Box::new(|t, p| t.concat_cols(p[0], p[1]))),
            ("mean_rows", vec![a.clone()], Box::new(|t, p| t.mean_rows(p[0]))),
            ("gather", vec![a.clone()], Box::new(|t, p| t.gather_rows(p[0], &gather))),
            ("transpose", vec![a.clone()], Box::new(|t, p| t.transpose(p[0]))),
            ("softmax_rows", vec![a.clone()], Box::new(|t, p| t.softmax_rows(p[0]))),
            ("masked_softmax", vec![a.clone()], Box::new(|t, p| t.masked_softmax(p[0], &mask))),
            ("slice", vec![a.clone()], Box::new(|t, p| t.slice_cols(p[0], start, width))),
            ("element", vec![a.clone()], Box::new(|t, p| t.element(p[0], pick))),
            ("dropout", vec![a.clone()], Box::new(|t, p| t.dropout(p[0], keep.clone()))),
            ("bce", vec![prob.clone()], Box::new(|t, p| t.bce(p[0], target, PROB_EPS))),
            ("squared_norm", vec![a.clone()], Box::new(|t, p| t.squared_norm(p[0]))),
            ("sum", vec![a.clone()], Box::new(|t, p| t.sum(p[0]))),
        ];
        for (name, params, f) in cases {
            let report = grad_check(
                |t, p| {
                    let out = f(t, p)?;
                    weighted_sum(t, out, trial)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "op {name}, trial {trial}: {report:?}");
            worst = worst.max(report.max_rel_error);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn concat_backward_splits_gradient_exactly() {
    let mut r = rng(9);
    let mut tape = Tape::new();
    let a = tape.leaf(Matrix::uniform(2, 3, 1.0, &mut r)).unwrap();
    let b = tape.leaf(Matrix::uniform(2, 2, 1.0, &mut r)).unwrap();
    let c = tape.concat_cols(a, b).unwrap();
    let loss = weighted_sum(&mut tape, c, 4).unwrap();
    let grads = tape.backward(loss).unwrap();
    let (ga, gb, gc) = (grads.get(a), grads.get(b), grads.get(c));
    assert!((ga.squared_norm() + gb.squared_norm() - gc.squared_norm()).abs() < 1e-12);
    for i in 0..2 {
        assert_eq!(ga.row_slice(i), &gc.row_slice(i)[..3]);
        assert_eq!(gb.row_slice(i), &gc.row_slice(i)[3..]);
    }
}

#[test]
fn non_participating_nodes_get_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.leaf(Matrix::row(vec![1.0, 2.0])).unwrap();
    let unused = tape.leaf(Matrix::row(vec![3.0, 4.0, 5.0])).unwrap();
    let loss = tape.squared_norm(used).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(unused), Matrix::zeros(1, 3));
}

proptest! {
    #[test]
    fn masked_softmax_normalizes_and_is_shift_invariant(
        scores in prop::collection::vec(-50.0f64..50.0, 1..12),
        flags in prop::collection::vec(any::<bool>(), 12),
        shift in -100.0f64..100.0,
    ) {
        let n = scores.len();
        let mut mask = BoolMask::from_allowed(flags[..n].to_vec());
        mask.allow(n - 1);
        let base = masked_softmax_values(&Matrix::row(scores.clone()), &mask).unwrap();
        let total: f64 = base.as_slice().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for j in 0..n {
            if !mask.is_allowed(j) {
                prop_assert_eq!(base.as_slice()[j].to_bits(), 0.0f64.to_bits());
            }
        }
        let shifted: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(j, s)| if mask.is_allowed(j) { s + shift } else { *s })
            .collect();
        let moved = masked_softmax_values(&Matrix::row(shifted), &mask).unwrap();
        prop_assert!(base.max_abs_diff(&moved) < 1e-12);
    }

    #[test]
    fn no_overflow_for_bounded_inputs(
        xs in prop::collection::vec(-1e3f64..1e3, 1..10),
        target in 0.0f64..=1.0,
    ) {
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row(xs)).unwrap();
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        let sm = tape.softmax_rows(x).unwrap();
        let ms = tape.masked_softmax(x, &BoolMask::all_allowed(n)).unwrap();
        let lg = tape.log(x, PROB_EPS).unwrap();
        let p = tape.element(s, 0).unwrap();
        let bce = tape.bce(p, target, PROB_EPS).unwrap();
        let mut parts = vec![bce];
        for node in [s, t, sm, ms, lg] {
            parts.push(tape.sum(node).unwrap());
        }
        let loss = tape.sum_scalars(&parts).unwrap();
        prop_assert!(tape.scalar(loss).is_finite());
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.get(x).is_finite());
    }
}
