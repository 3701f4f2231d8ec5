//! The recommender network: concept embeddings, a set encoder over the
//! candidates, an LSTM student-state decoder that points at candidates one
//! step at a time, and a knowledge-tracing head on the decoder state.

mod params;

pub use params::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, AttentionParams,
    BoundParams, KtParams, LstmParams, MlpParams, ModelParams, ScorerParams, CHECKPOINT_VERSION,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, HistoryItem};
use crate::error::{Error, Result};
use crate::tensor::{lstm_step, BoolMask, LstmState, Matrix, Node, Tape, PROB_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Self-attention and pooled-MLP branches, concatenated.
    #[default]
    Combined,
    AttentionOnly,
    MlpOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_concepts: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub score_dim: usize,
    pub dropout_rate: f64,
    pub encoder: EncoderVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_concepts: 16,
            embed_dim: 64,
            lstm_hidden: 64,
            score_dim: 64,
            dropout_rate: 0.5,
            encoder: EncoderVariant::Combined,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.embed_dim == 0 || self.lstm_hidden == 0 || self.score_dim == 0 {
            return Err(Error::Validation("model dimensions must all be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Width of each encoded candidate row.
    pub fn encoder_width(&self) -> usize {
        match self.encoder {
            EncoderVariant::Combined => 2 * self.embed_dim,
            EncoderVariant::AttentionOnly | EncoderVariant::MlpOnly => self.embed_dim,
        }
    }

    /// The LSTM consumes encoded candidates, so its input width matches.
    pub fn lstm_input_width(&self) -> usize {
        self.encoder_width()
    }
}

/// Forward-pass options.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Enables dropout in the encoder MLP.
    pub training: bool,
    /// Replaces the encoder MLP by the identity. Test hook.
    pub(crate) identity_mlp: bool,
}

impl ForwardOptions {
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

fn check_candidates(config: &ModelConfig, candidates: &[usize]) -> Result<()> {
    let n = config.num_concepts;
    if candidates.is_empty() || candidates.len() > n {
        return Err(Error::Validation(format!(
            "candidate count {} outside [1, {n}]",
            candidates.len()
        )));
    }
    let mut seen = vec![false; n];
    for &c in candidates {
        if c >= n {
            return Err(Error::UnknownConcept { id: c, universe: n });
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::Validation(format!("duplicate candidate {c}")));
        }
    }
    Ok(())
}

/// Encodes the candidate set into one row per candidate (`m x enc_width`).
/// Row order follows `candidates`.
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &BoundParams,
    config: &ModelConfig,
    candidates: &[usize],
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<Node> {
    check_candidates(config, candidates)?;
    let x = tape.gather_rows(params.embedding, candidates)?;

    let attention = match params.attention {
        Some([wq, wk, wv]) => {
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, 1.0 / (config.embed_dim as f64).sqrt())?;
            let weights = tape.softmax_rows(logits)?;
            Some(tape.matmul(weights, v)?)
        }
        None => None,
    };

    let pooled = match params.mlp {
        Some([hw, hb, ow, ob]) => {
            let features = if opts.identity_mlp {
                x
            } else {
                let hidden = tape.matmul(x, hw)?;
                let hidden = tape.add_row(hidden, hb)?;
                let mut hidden = tape.tanh(hidden)?;
                if opts.training && config.dropout_rate > 0.0 {
                    let keep = 1.0 - config.dropout_rate;
                    let mask = (0..tape.value(hidden).len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    hidden = tape.dropout(hidden, mask)?;
                }
                let out = tape.matmul(hidden, ow)?;
                tape.add_row(out, ob)?
            };
            let mean = tape.mean_rows(features)?;
            Some(tape.add_row(features, mean)?)
        }
        None => None,
    };

    match (attention, pooled) {
        (Some(a), Some(l)) => tape.concat_cols(a, l),
        (Some(a), None) => Ok(a),
        (None, Some(l)) => Ok(l),
        (None, None) => Err(Error::Validation("encoder has no branch".into())),
    }
}

fn zero_state(tape: &mut Tape, hidden: usize) -> Result<LstmState> {
    Ok(LstmState {
        h: tape.leaf(Matrix::zeros(1, hidden))?,
        c: tape.leaf(Matrix::zeros(1, hidden))?,
    })
}

/// Runs the shared LSTM over the projected history `[x_c ; y]` rows from a
/// zero state. An empty history yields the zero state.
pub fn init_state(
    tape: &mut Tape,
    params: &BoundParams,
    config: &ModelConfig,
    history: &[HistoryItem],
) -> Result<LstmState> {
    let mut state = zero_state(tape, config.lstm_hidden)?;
    for item in history {
        if !(0.0..=1.0).contains(&item.mastery) {
            return Err(Error::Validation(format!(
                "history mastery {} outside [0, 1]",
                item.mastery
            )));
        }
        let x = tape.gather_rows(params.embedding, &[item.concept])?;
        let y = tape.constant_scalar(item.mastery)?;
        let xy = tape.concat_cols(x, y)?;
        let input = tape.matmul(xy, params.history_proj)?;
        state = lstm_step(tape, &params.lstm, input, state)?;
    }
    Ok(state)
}

/// Mean of the target concept embeddings (`1 x d`).
pub fn target_embedding(tape: &mut Tape, params: &BoundParams, targets: &[usize]) -> Result<Node> {
    if targets.is_empty() {
        return Err(Error::Validation("target set is empty".into()));
    }
    let rows = tape.gather_rows(params.embedding, targets)?;
    tape.mean_rows(rows)
}

/// Step-invariant parts of the pointer scorer, computed once per episode.
#[derive(Clone, Copy, Debug)]
pub struct ScoreContext {
    /// `E_s W_2`, `m x a`.
    cand_proj: Node,
    /// `x_T W_3 + b`, `1 x a`.
    target_term: Node,
}

impl ScoreContext {
    pub fn new(tape: &mut Tape, params: &BoundParams, encoded: Node, target_embed: Node) -> Result<Self> {
        let cand_proj = tape.matmul(encoded, params.scorer_cand_w)?;
        let t = tape.matmul(target_embed, params.scorer_target_w)?;
        let target_term = tape.add(t, params.scorer_bias)?;
        Ok(Self { cand_proj, target_term })
    }

    /// One score per candidate (`m x 1`) for decoder hidden state `h`.
    pub fn scores(&self, tape: &mut Tape, params: &BoundParams, h: Node) -> Result<Node> {
        let s = tape.matmul(h, params.scorer_state_w)?;
        let shift = tape.add(s, self.target_term)?;
        let z = tape.add_row(self.cand_proj, shift)?;
        let z = tape.tanh(z)?;
        tape.matmul(z, params.scorer_out)
    }
}

/// Scores every candidate for the next step. Already-selected candidates
/// are scored too; exclusion happens in [`step_distribution`].
pub fn step_scores(
    tape: &mut Tape,
    params: &BoundParams,
    h: Node,
    encoded: Node,
    target_embed: Node,
) -> Result<Node> {
    ScoreContext::new(tape, params, encoded, target_embed)?.scores(tape, params, h)
}

/// Softmax over the still-available candidates; selected ones get exactly 0.
pub fn step_distribution(tape: &mut Tape, scores: Node, available: &BoolMask) -> Result<Node> {
    if available.allowed_count() == 0 {
        return Err(Error::Precondition("every candidate has already been selected".into()));
    }
    tape.masked_softmax(scores, available)
}

/// Mastery probability predicted from a decoder hidden state.
pub fn kt_prediction(tape: &mut Tape, params: &BoundParams, h: Node) -> Result<Node> {
    let [hw, hb, ow, ob] = params.kt;
    let z = tape.matmul(h, hw)?;
    let z = tape.add(z, hb)?;
    let z = tape.tanh(z)?;
    let z = tape.matmul(z, ow)?;
    let z = tape.add(z, ob)?;
    tape.sigmoid(z)
}

/// How the decoder picks each step.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// Draw from the step distribution.
    Sample,
    /// Highest probability, smallest candidate position on ties.
    Greedy,
    /// Follow the given candidate positions (for scoring a known path).
    Replay(&'a [usize]),
}

/// A decoded path and its per-step quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    /// Positions into the episode's candidate list.
    pub positions: Vec<usize>,
    /// Concept ids, in path order.
    pub concepts: Vec<usize>,
    pub step_probs: Vec<f64>,
    pub step_logprobs: Vec<f64>,
    /// Predicted mastery after each step.
    pub kt_preds: Vec<f64>,
    /// Step distributions over all candidates, for diagnostics.
    pub step_distributions: Vec<Vec<f64>>,
}

impl PathSample {
    pub fn log_prob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }
}

/// A rollout still attached to its tape.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub sample: PathSample,
    pub logprob_nodes: Vec<Node>,
    pub kt_nodes: Vec<Node>,
}

fn pick<R: Rng + ?Sized>(probs: &[f64], available: &BoolMask, mode: DecodeMode<'_>, step: usize, rng: &mut R) -> Result<usize> {
    match mode {
        DecodeMode::Greedy => {
            let mut best = None;
            for (j, &p) in probs.iter().enumerate() {
                if available.is_allowed(j) && best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((j, p));
                }
            }
            Ok(best.expect("at least one available").0)
        }
        DecodeMode::Sample => {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut last = None;
            for (j, &p) in probs.iter().enumerate() {
                if !available.is_allowed(j) {
                    continue;
                }
                cum += p;
                last = Some(j);
                if u < cum {
                    return Ok(j);
                }
            }
            Ok(last.expect("at least one available"))
        }
        DecodeMode::Replay(path) => {
            let j = *path
                .get(step)
                .ok_or_else(|| Error::Validation("replay path shorter than path length".into()))?;
            if j >= probs.len() || !available.is_allowed(j) {
                return Err(Error::Validation(format!("replay position {j} is not available")));
            }
            Ok(j)
        }
    }
}

/// Decodes a path of `episode.path_len` candidates, recording everything on
/// `tape` so losses can be built on top.
pub fn roll_path<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &BoundParams,
    config: &ModelConfig,
    episode: &Episode,
    mode: DecodeMode<'_>,
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<Rollout> {
    let m = episode.candidates.len();
    if episode.path_len > m {
        return Err(Error::Validation(format!(
            "path length {} exceeds candidate count {m}",
            episode.path_len
        )));
    }
    let encoded = encode(tape, params, config, &episode.candidates, opts, rng)?;
    let target = target_embedding(tape, params, &episode.targets)?;
    let ctx = ScoreContext::new(tape, params, encoded, target)?;
    let mut state = init_state(tape, params, config, &episode.history)?;
    let mut available = BoolMask::all_allowed(m);

    let n = episode.path_len;
    let mut sample = PathSample {
        positions: Vec::with_capacity(n),
        concepts: Vec::with_capacity(n),
        step_probs: Vec::with_capacity(n),
        step_logprobs: Vec::with_capacity(n),
        kt_preds: Vec::with_capacity(n),
        step_distributions: Vec::with_capacity(n),
    };
    let mut logprob_nodes = Vec::with_capacity(n);
    let mut kt_nodes = Vec::with_capacity(n);

    for step in 0..n {
        let scores = ctx.scores(tape, params, state.h)?;
        let probs = step_distribution(tape, scores, &available)?;
        let j = pick(tape.value(probs).as_slice(), &available, mode, step, rng)?;
        let p = tape.element(probs, j)?;
        let logp = tape.log(p, PROB_EPS)?;

        sample.step_distributions.push(tape.value(probs).as_slice().to_vec());
        sample.positions.push(j);
        sample.concepts.push(episode.candidates[j]);
        sample.step_probs.push(tape.scalar(p));
        sample.step_logprobs.push(tape.scalar(logp));
        logprob_nodes.push(logp);
        available.block(j);

        let input = tape.gather_rows(encoded, &[j])?;
        state = lstm_step(tape, &params.lstm, input, state)?;
        let kt = kt_prediction(tape, params, state.h)?;
        sample.kt_preds.push(tape.scalar(kt));
        kt_nodes.push(kt);
    }
    Ok(Rollout {
        sample,
        logprob_nodes,
        kt_nodes,
    })
}

/// Configuration plus weights, with tape-free inference helpers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Decodes one path in evaluation mode (no dropout).
    pub fn decode<R: Rng + ?Sized>(&self, episode: &Episode, mode: DecodeMode<'_>, rng: &mut R) -> Result<PathSample> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let rollout = roll_path(&mut tape, &bound, &self.config, episode, mode, ForwardOptions::eval(), rng)?;
        Ok(rollout.sample)
    }

    pub fn greedy(&self, episode: &Episode) -> Result<PathSample> {
        // Greedy decoding in eval mode draws nothing from the RNG.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.decode(episode, DecodeMode::Greedy, &mut rng)
    }
}

#[cfg(test)]
mod tests;
