//! Finite-difference verification of the differentiable pieces, from single
//! ops up to the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{DecodeMode, EncoderVariant, Model, ModelConfig};
use crate::rng::{domain, stream_rng};
use crate::simulator::{Preset, Simulator, World};
use crate::tensor::{grad_check, lstm_step, BoolMask, GradCheckReport, LstmState, LstmWeights, Matrix, Node, Tape, PROB_EPS};
use crate::training::{replay_objective, SamplerConfig, Scenario, Split, EpisodeSampler};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Setup of the whole-objective check.
#[derive(Clone, Debug, Serialize)]
pub struct ObjectiveCheck {
    pub model: ModelConfig,
    pub candidates: usize,
    pub path_len: usize,
    pub beta: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ObjectiveCheck {
    /// Tiny combined-encoder model with dropout active.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                num_concepts: 8,
                embed_dim: 4,
                lstm_hidden: 4,
                score_dim: 4,
                dropout_rate: 0.5,
                encoder: EncoderVariant::Combined,
            },
            candidates: 5,
            path_len: 3,
            beta: 1.0,
            l2: 4e-5,
            seed: 0,
        }
    }
}

/// Gradient of the policy, knowledge-tracing and L2 terms for one sampled
/// episode and path, against central differences over every parameter.
pub fn check_objective(setup: &ObjectiveCheck, eps: f64) -> Result<GradCheckReport> {
    let n = setup.model.num_concepts;
    let world = World::preset(Preset::PrereqChain, n, setup.seed)?;
    let sampler = EpisodeSampler::new(
        n,
        SamplerConfig {
            scenario: Scenario::RandomSubset,
            path_len: setup.path_len,
            candidate_size: Some(setup.candidates),
            ..SamplerConfig::default()
        },
        setup.seed,
    )?;
    let episode = sampler.sample(&world, Split::Train, 0)?;
    let model = Model::new(setup.model.clone(), &mut stream_rng(setup.seed, domain::INIT, 0))?;
    let sample = model.decode(&episode, DecodeMode::Sample, &mut stream_rng(setup.seed, domain::POLICY, 0))?;
    let outcome = world.run_path(
        &episode.history,
        &sample.concepts,
        &episode.targets,
        &mut stream_rng(setup.seed, domain::SIM, 0),
    )?;
    grad_check(
        |tape, leaves| {
            replay_objective(
                tape,
                leaves,
                &model.config,
                &episode,
                &sample.positions,
                outcome.effect,
                &outcome.feedback,
                setup.beta,
                setup.l2,
                &mut stream_rng(setup.seed, domain::POLICY, 1),
            )
        },
        &model.params.tensors(),
        eps,
    )
}

/// `sum(out * w)` for fixed random `w`, so each output entry gets its own
/// upstream gradient.
fn readout(tape: &mut Tape, out: Node, seed: u64) -> Result<Node> {
    let (r, c) = tape.value(out).shape();
    let w = tape.leaf(Matrix::uniform(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type OpCase = (&'static str, Vec<Matrix>, Box<dyn Fn(&mut Tape, &[Node]) -> Result<Node>>);

/// Checks the core ops (matrix product, masked softmax, LSTM step,
/// cross-entropy and the elementwise nonlinearities) on random inputs.
pub fn check_ops(seed: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::uniform(3, 4, 1.0, &mut r);
    let b = Matrix::uniform(4, 2, 1.0, &mut r);
    let scores = Matrix::uniform(5, 1, 2.0, &mut r);
    let prob = Matrix::scalar(r.random_range(0.05..0.95));
    let target = r.random_range(0.0..=1.0);
    let (inp, hid) = (3, 2);
    let lstm: Vec<Matrix> = [(inp, 4 * hid), (hid, 4 * hid), (1, 4 * hid), (1, hid), (1, hid), (1, inp)]
        .iter()
        .map(|&(rows, cols)| Matrix::uniform(rows, cols, 0.8, &mut r))
        .collect();
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![a.clone(), b], Box::new(|t, p| t.matmul(p[0], p[1]))),
        (
            "masked_softmax",
            vec![scores],
            Box::new(|t, p| t.masked_softmax(p[0], &BoolMask::from_allowed(vec![true, false, true, true, false]))),
        ),
        ("bce", vec![prob], Box::new(move |t, p| t.bce(p[0], target, PROB_EPS))),
        ("tanh", vec![a.clone()], Box::new(|t, p| t.tanh(p[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, p| t.sigmoid(p[0]))),
        ("mean_rows", vec![a], Box::new(|t, p| t.mean_rows(p[0]))),
        (
            "lstm_step",
            lstm,
            Box::new(|t, p| {
                let w = LstmWeights {
                    w_input: p[0],
                    w_hidden: p[1],
                    bias: p[2],
                };
                let s = lstm_step(t, &w, p[5], LstmState { h: p[3], c: p[4] })?;
                t.concat_cols(s.h, s.c)
            }),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, params, f))| {
            let report = grad_check(
                |t, p| {
                    let out = f(t, p)?;
                    readout(t, out, seed + i as u64)
                },
                &params,
                eps,
            )?;
            Ok((name, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass() {
        for (name, r) in check_ops(3, DEFAULT_EPS).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn objective_covers_every_parameter() {
        let setup = ObjectiveCheck::default();
        let r = check_objective(&setup, DEFAULT_EPS).unwrap();
        let model = Model::new(setup.model.clone(), &mut stream_rng(0, domain::INIT, 0)).unwrap();
        assert_eq!(r.entries_checked, model.params.parameter_count());
        assert!(r.max_abs_error < 1e-8, "{r:?}");
    }
}
