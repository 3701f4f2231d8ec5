//! Policy-gradient training of the recommender against a simulator, with an
//! auxiliary knowledge-tracing loss on the decoder states.

mod loss;
mod optim;
mod sampler;

pub use loss::{episode_loss, kt_loss, l2_penalty, policy_loss, EpisodeLoss};
pub use optim::{lr_at, Optimizer, OptimizerKind};
pub use sampler::{EpisodeSampler, SamplerConfig, Scenario, Split};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::episode::{episodes_hash, Episode};
use crate::error::{Error, Result};
use crate::model::{roll_path, BoundParams, DecodeMode, ForwardOptions, Model, ModelConfig};
use crate::rng::{domain, stream_rng};
use crate::simulator::Simulator;
use crate::tensor::{Matrix, Node, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer updates per epoch.
    pub batches_per_epoch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub l2: f64,
    /// Weight of the knowledge-tracing loss.
    pub beta: f64,
    pub path_length: usize,
    pub candidate_size: Option<usize>,
    pub scenario: Scenario,
    pub seed: u64,
    /// Subtract a reward baseline: the running mean reward, or the
    /// leave-one-out episode mean when `rollouts_per_episode > 1`.
    pub baseline_subtraction: bool,
    /// Decay of the running mean reward.
    pub baseline_decay: f64,
    /// Sampled paths per episode in each update.
    pub rollouts_per_episode: usize,
    pub optimizer: OptimizerKind,
    /// Size of the held-out set scored greedily during training.
    pub eval_episodes: usize,
    /// Evaluate every this many epochs (the last epoch always is).
    pub eval_every: usize,
    pub max_history: usize,
    pub max_targets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            batches_per_epoch: 1,
            lr_start: 1e-3,
            lr_end: 1e-5,
            l2: 4e-5,
            beta: 1.0,
            path_length: 20,
            candidate_size: None,
            scenario: Scenario::Fixed,
            seed: 0,
            baseline_subtraction: false,
            baseline_decay: 0.9,
            rollouts_per_episode: 1,
            optimizer: OptimizerKind::Adam,
            eval_episodes: 100,
            eval_every: 1,
            max_history: 10,
            max_targets: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.eval_every == 0 || self.rollouts_per_episode == 0 {
            return bad("batch_size, batches_per_epoch, rollouts_per_episode and eval_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay must lie in [0, 1), got {}", self.baseline_decay));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return bad(format!("learning rates must be positive, got {} -> {}", self.lr_start, self.lr_end));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            scenario: self.scenario,
            path_len: self.path_length,
            candidate_size: self.candidate_size,
            max_history: self.max_history,
            max_targets: self.max_targets,
        }
    }

    pub fn sampler(&self, num_concepts: usize) -> Result<EpisodeSampler> {
        EpisodeSampler::new(num_concepts, self.sampler_config(), self.seed)
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    #[serde(rename = "mean_sampled_ET")]
    pub mean_sampled_et: f64,
    /// Mean greedy learning effect on the held-out set, when evaluated.
    #[serde(rename = "greedy_ET")]
    pub greedy_et: Option<f64>,
    pub loss_pg: f64,
    pub loss_kt: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl TrainRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        Self { seconds: 0.0, ..self.clone() } == Self { seconds: 0.0, ..other.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub updates: usize,
    pub final_greedy_et: Option<f64>,
    pub best_greedy_et: Option<f64>,
    pub best_epoch: Option<usize>,
    pub parameter_count: usize,
    pub eval_episodes_hash: String,
    pub total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<TrainRecord>,
    pub summary: TrainSummary,
}

/// Path and score of one evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub path: Vec<usize>,
    pub effect: f64,
    pub feedback: Vec<f64>,
}

/// Scores the model's greedy path on each episode. Simulator noise for
/// episode `i` comes from stream `(seed, i)`.
pub fn evaluate_greedy<S: Simulator>(model: &Model, sim: &S, episodes: &[Episode], seed: u64) -> Result<Vec<EvalResult>> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let sample = model.greedy(ep)?;
            let mut rng = stream_rng(seed, domain::EVAL_SIM, i as u64);
            let out = sim.run_path(&ep.history, &sample.concepts, &ep.targets, &mut rng)?;
            Ok(EvalResult {
                path: sample.concepts,
                effect: out.effect,
                feedback: out.feedback,
            })
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Summed gradients and statistics of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Gradient of the mean batch objective plus the L2 term, in canonical
    /// tensor order.
    pub grads: Vec<Matrix>,
    /// Learning effect of every rollout, episode-major.
    pub effects: Vec<f64>,
    pub loss_pg: f64,
    pub loss_kt: f64,
}

fn add_into(acc: &mut [Matrix], tape_grads: &crate::tensor::Gradients, nodes: &[Node]) {
    for (a, &n) in acc.iter_mut().zip(nodes) {
        a.add_assign(&tape_grads.get(n));
    }
}

fn zeros_like(model: &Model) -> Vec<Matrix> {
    model
        .params
        .named_tensors()
        .iter()
        .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
        .collect()
}

/// Reward baseline for rollout `k` of an episode whose rollouts scored
/// `effects`.
fn advantage(cfg: &TrainConfig, effects: &[f64], k: usize, running: f64) -> f64 {
    if !cfg.baseline_subtraction {
        return effects[k];
    }
    if effects.len() > 1 {
        let others = (effects.iter().sum::<f64>() - effects[k]) / (effects.len() - 1) as f64;
        effects[k] - others
    } else {
        effects[k] - running
    }
}

/// Samples `rollouts_per_episode` paths per episode, simulates them, and
/// returns the gradient of
/// `mean[-(E - b) sum log p + beta * kt] + l2 * sum ||W||^2`.
///
/// Without baseline subtraction `b = 0`. With it, `b` is the leave-one-out
/// mean over the episode's other rollouts, or `running_baseline` when each
/// episode gets a single rollout. Rollout `k` of batch episode `e` uses RNG
/// streams indexed `(first_index + e) * rollouts + k`.
pub fn batch_gradient<S: Simulator>(
    model: &Model,
    sim: &S,
    episodes: &[Episode],
    cfg: &TrainConfig,
    first_index: u64,
    running_baseline: f64,
) -> Result<BatchGradient> {
    let rollouts = cfg.rollouts_per_episode;
    let mut grads = zeros_like(model);
    let mut effects = Vec::with_capacity(episodes.len() * rollouts);
    let (mut pg_total, mut kt_total) = (0.0, 0.0);

    for (e, ep) in episodes.iter().enumerate() {
        let mut done = Vec::with_capacity(rollouts);
        for k in 0..rollouts {
            let index = (first_index + e as u64) * rollouts as u64 + k as u64;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape)?;
            let mut rng = stream_rng(cfg.seed, domain::POLICY, index);
            let rollout = roll_path(
                &mut tape,
                &bound,
                &model.config,
                ep,
                DecodeMode::Sample,
                ForwardOptions::training(),
                &mut rng,
            )?;
            let mut sim_rng = stream_rng(cfg.seed, domain::SIM, index);
            let out = sim.run_path(&ep.history, &rollout.sample.concepts, &ep.targets, &mut sim_rng)?;
            done.push((tape, bound, rollout, out));
        }
        let episode_effects: Vec<f64> = done.iter().map(|d| d.3.effect).collect();
        for (k, (mut tape, bound, rollout, out)) in done.into_iter().enumerate() {
            let adv = advantage(cfg, &episode_effects, k, running_baseline);
            let parts = episode_loss(
                &mut tape,
                &rollout.logprob_nodes,
                &rollout.kt_nodes,
                adv,
                &out.feedback,
                cfg.beta,
            )?;
            add_into(&mut grads, &tape.backward(parts.combined)?, bound.nodes());
            pg_total += tape.scalar(parts.policy);
            kt_total += tape.scalar(parts.kt);
        }
        effects.extend(episode_effects);
    }

    let count = effects.len().max(1) as f64;
    for (g, (_, w)) in grads.iter_mut().zip(model.params.named_tensors()) {
        g.scale_in_place(1.0 / count);
        let mut decay = w.clone();
        decay.scale_in_place(2.0 * cfg.l2);
        g.add_assign(&decay);
    }
    Ok(BatchGradient {
        grads,
        effects,
        loss_pg: pg_total / count,
        loss_kt: kt_total / count,
    })
}

/// The full single-episode objective on a fixed path, as a function of the
/// parameter leaves in canonical order. Dropout masks are drawn from `rng`;
/// re-seed it per call to see the same network each time.
#[allow(clippy::too_many_arguments)]
pub fn replay_objective<R: rand::Rng + ?Sized>(
    tape: &mut Tape,
    params: &[Node],
    config: &ModelConfig,
    episode: &Episode,
    positions: &[usize],
    effect: f64,
    feedback: &[f64],
    beta: f64,
    l2: f64,
    rng: &mut R,
) -> Result<Node> {
    let bound = BoundParams::from_nodes(
        config.encoder.uses_attention(),
        config.encoder.uses_mlp(),
        params.to_vec(),
    )?;
    let rollout = roll_path(
        tape,
        &bound,
        config,
        episode,
        DecodeMode::Replay(positions),
        ForwardOptions::training(),
        rng,
    )?;
    let parts = episode_loss(tape, &rollout.logprob_nodes, &rollout.kt_nodes, effect, feedback, beta)?;
    let penalty = l2_penalty(tape, params, l2)?;
    tape.add(parts.combined, penalty)
}

fn diverged(epoch: usize, reason: String, episodes: &[Episode]) -> Error {
    let dump = serde_json::json!({ "epoch": epoch, "reason": reason, "episodes": episodes }).to_string();
    Error::Diverged { epoch, reason, dump }
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn train<S: Simulator>(sim: &S, model_config: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = stream_rng(cfg.seed, domain::INIT, 0);
    let model = Model::new(model_config, &mut rng)?;
    train_model(sim, model, cfg, |_| {})
}

/// Trains `model` in place of a fresh one; `observer` sees each epoch's
/// record as soon as it is complete.
pub fn train_model<S: Simulator>(
    sim: &S,
    mut model: Model,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if model.config.num_concepts != sim.num_concepts() {
        return Err(Error::Validation(format!(
            "model covers {} concepts but the simulator has {}",
            model.config.num_concepts,
            sim.num_concepts()
        )));
    }
    let sampler = cfg.sampler(sim.num_concepts())?;
    let eval_set = sampler.batch(sim, Split::Eval, 0, cfg.eval_episodes)?;
    let shapes: Vec<_> = model.params.named_tensors().iter().map(|(_, m)| m.shape()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, &shapes);
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut updates = 0usize;
    let mut running_baseline: Option<f64> = None;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_at(cfg.lr_start, cfg.lr_end, epoch, cfg.epochs);
        let mut effects = Vec::new();
        let (mut loss_pg, mut loss_kt, mut grad_norm) = (0.0, 0.0, 0.0);
        for b in 0..cfg.batches_per_epoch {
            let first = ((epoch * cfg.batches_per_epoch + b) * cfg.batch_size) as u64;
            let batch = sampler.batch(sim, Split::Train, first, cfg.batch_size)?;
            let bg = match batch_gradient(&model, sim, &batch, cfg, first, running_baseline.unwrap_or(0.0)) {
                Ok(bg) => bg,
                Err(Error::NonFinite(what)) => {
                    return Err(diverged(epoch, format!("non-finite value in {what}"), &batch))
                }
                Err(e) => return Err(e),
            };
            let norm = bg.grads.iter().map(Matrix::squared_norm).sum::<f64>().sqrt();
            if !norm.is_finite() || !bg.loss_pg.is_finite() || !bg.loss_kt.is_finite() {
                return Err(diverged(epoch, "non-finite loss or gradient".into(), &batch));
            }
            optimizer.step(&mut model.params.tensors_mut(), &bg.grads, lr);
            if !model.params.tensors_mut().iter().all(|m| m.is_finite()) {
                return Err(diverged(epoch, "non-finite parameters after update".into(), &batch));
            }
            updates += 1;
            let batch_mean = mean(&bg.effects);
            running_baseline = Some(match running_baseline {
                None => batch_mean,
                Some(b) => cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * batch_mean,
            });
            effects.extend(bg.effects);
            loss_pg += bg.loss_pg;
            loss_kt += bg.loss_kt;
            grad_norm += norm;
        }
        let batches = cfg.batches_per_epoch as f64;
        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let greedy_et = if evaluate && !eval_set.is_empty() {
            let results = evaluate_greedy(&model, sim, &eval_set, cfg.seed)?;
            Some(mean(&results.iter().map(|r| r.effect).collect::<Vec<_>>()))
        } else {
            None
        };
        let record = TrainRecord {
            epoch,
            mean_sampled_et: mean(&effects),
            greedy_et,
            loss_pg: loss_pg / batches,
            loss_kt: loss_kt / batches,
            grad_norm: grad_norm / batches,
            lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        observer(&record);
        records.push(record);
    }

    let evaluated: Vec<(usize, f64)> = records.iter().filter_map(|r| r.greedy_et.map(|g| (r.epoch, g))).collect();
    let best = evaluated
        .iter()
        .copied()
        .fold(None, |acc: Option<(usize, f64)>, x| match acc {
            Some(a) if a.1 >= x.1 => Some(a),
            _ => Some(x),
        });
    let summary = TrainSummary {
        epochs_completed: records.len(),
        updates,
        final_greedy_et: evaluated.last().map(|x| x.1),
        best_greedy_et: best.map(|b| b.1),
        best_epoch: best.map(|b| b.0),
        parameter_count: model.params.parameter_count(),
        eval_episodes_hash: episodes_hash(&eval_set),
        total_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model,
        records,
        summary,
    })
}

pub fn write_records_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
