//! Synthetic student environment.
//!
//! Latent mastery per concept lives in `[0, 1]`. Studying a concept raises
//! its mastery by an amount gated by how well its prerequisites are already
//! mastered; every step all masteries decay slightly. Exams average mastery
//! over the target concepts, and the learning effect of a path is the gain
//! normalized by the headroom left before the path.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episode::HistoryItem;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Matrix};

/// Upper bound of mastery, hence of any exam score.
pub const MASTERY_CEILING: f64 = 1.0;

/// Default cap on the number of paths [`brute_force_optimal`] may evaluate.
pub const DEFAULT_ENUMERATION_CAP: u64 = 50_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Feedback is the post-study mastery itself.
    #[default]
    Continuous,
    /// Feedback is a correct/incorrect draw with success probability equal
    /// to the post-study mastery.
    Bernoulli,
}

/// Full, explicit description of a synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_concepts: usize,
    /// `influence[a][b]`: how much mastery of `a` helps when studying `b`.
    pub influence: Matrix,
    pub difficulty: Vec<f64>,
    pub base_gain: f64,
    /// Per-step retention factor applied to every concept.
    pub decay: f64,
    pub noise_std: f64,
    /// Multiplies the prerequisite term inside the readiness logistic.
    pub sharpness: f64,
    pub baseline_mastery: f64,
    pub feedback: FeedbackMode,
    pub seed: u64,
}

impl WorldConfig {
    /// A world with no prerequisite structure and default dynamics.
    pub fn blank(num_concepts: usize) -> Self {
        Self {
            num_concepts,
            influence: Matrix::zeros(num_concepts, num_concepts),
            difficulty: vec![0.0; num_concepts],
            base_gain: 0.3,
            decay: 0.995,
            noise_std: 0.0,
            sharpness: 1.0,
            baseline_mastery: 0.1,
            feedback: FeedbackMode::Continuous,
            seed: 0,
        }
    }
}

/// Named influence structures shipped with the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Disjoint prerequisite chains over a seeded permutation of the ids.
    PrereqChain,
    /// Sparse random influences with random difficulties.
    RandomSparse,
    /// Two halves whose members support each other.
    TwoCluster,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "prereq-chain" => Ok(Preset::PrereqChain),
            "random-sparse" => Ok(Preset::RandomSparse),
            "two-cluster" => Ok(Preset::TwoCluster),
            other => Err(Error::Config(format!(
                "unknown world preset `{other}` (expected prereq-chain, random-sparse or two-cluster)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::PrereqChain => "prereq-chain",
            Preset::RandomSparse => "random-sparse",
            Preset::TwoCluster => "two-cluster",
        }
    }
}

/// Length of each chain in the prereq-chain preset.
pub const CHAIN_LEN: usize = 4;

impl WorldConfig {
    pub fn preset(preset: Preset, num_concepts: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = num_concepts;
        let mut cfg = Self::blank(n);
        cfg.seed = seed;
        match preset {
            Preset::PrereqChain => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                cfg.base_gain = 1.0;
                cfg.sharpness = 6.0;
                for chain in order.chunks(CHAIN_LEN) {
                    cfg.difficulty[chain[0]] = -1.0;
                    for w in chain.windows(2) {
                        cfg.influence.set(w[0], w[1], 1.0);
                        cfg.difficulty[w[1]] = 1.5;
                    }
                }
            }
            Preset::RandomSparse => {
                cfg.base_gain = 0.6;
                cfg.sharpness = 4.0;
                for a in 0..n {
                    for b in 0..n {
                        if a != b && rng.random_bool(0.15) {
                            cfg.influence.set(a, b, rng.random_range(0.2..=1.0));
                        }
                    }
                }
                for d in &mut cfg.difficulty {
                    *d = rng.random_range(-1.0..2.0);
                }
            }
            Preset::TwoCluster => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let (left, right) = order.split_at(n / 2);
                cfg.base_gain = 0.6;
                cfg.sharpness = 4.0;
                for cluster in [left, right] {
                    let w = 1.0 / cluster.len().max(2).saturating_sub(1) as f64;
                    for &a in cluster {
                        for &b in cluster {
                            if a != b {
                                cfg.influence.set(a, b, w.min(1.0));
                            }
                        }
                    }
                    for &c in cluster {
                        cfg.difficulty[c] = 1.0;
                    }
                }
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_concepts;
        if n == 0 {
            return Err(Error::Validation("world needs at least one concept".into()));
        }
        if self.influence.shape() != (n, n) {
            return Err(Error::Validation(format!(
                "influence matrix is {:?}, expected {n}x{n}",
                self.influence.shape()
            )));
        }
        if self.difficulty.len() != n {
            return Err(Error::Validation("difficulty length differs from concept count".into()));
        }
        for a in 0..n {
            if self.influence.get(a, a) != 0.0 {
                return Err(Error::Validation(format!("influence diagonal at {a} is non-zero")));
            }
        }
        if self.influence.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("influence entries must lie in [0, 1]".into()));
        }
        let finite = self.difficulty.iter().all(|d| d.is_finite())
            && self.base_gain.is_finite()
            && self.sharpness.is_finite();
        if !finite {
            return Err(Error::Validation("world parameters must be finite".into()));
        }
        if !(self.base_gain > 0.0 && self.base_gain <= 1.0) {
            return Err(Error::Validation(format!("base_gain {} outside (0, 1]", self.base_gain)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Validation(format!("decay {} outside (0, 1]", self.decay)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Validation("noise_std must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_mastery) {
            return Err(Error::Validation("baseline_mastery outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Reads an `N x N` influence matrix from a header-less CSV, one row per
/// source concept.
pub fn load_influence_csv(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad influence entry `{f}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let m = Matrix::from_rows(&rows)?;
    if m.rows() != m.cols() {
        return Err(Error::Validation(format!("influence CSV is {:?}, not square", m.shape())));
    }
    Ok(m)
}

/// Latent per-concept mastery, always within `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentState {
    pub mastery: Vec<f64>,
}

/// Simulator response to a whole path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub exam_before: f64,
    pub exam_after: f64,
    pub ceiling: f64,
    pub effect: f64,
    /// Per-step mastery observed on each studied concept.
    pub feedback: Vec<f64>,
}

/// Normalized learning effect `(after - before) / (ceiling - before)`.
pub fn learning_effect(before: f64, after: f64, ceiling: f64) -> Result<f64> {
    if before >= ceiling {
        return Err(Error::DegenerateEpisode {
            exam_before: before,
            ceiling,
        });
    }
    Ok((after - before) / (ceiling - before))
}

/// Environment interface the recommender trains and is evaluated against.
pub trait Simulator {
    type State: Clone;

    fn num_concepts(&self) -> usize;

    fn ceiling(&self) -> f64 {
        MASTERY_CEILING
    }

    /// True when studying is a pure function of the state (no noise).
    fn is_deterministic(&self) -> bool;

    fn spawn_student(&self, history: &[HistoryItem]) -> Result<Self::State>;

    /// Studies `concept` once, returning the observed feedback.
    fn learn_step<R: Rng + ?Sized>(&self, state: &mut Self::State, concept: usize, rng: &mut R) -> f64;

    fn exam(&self, state: &Self::State, targets: &[usize]) -> Result<f64>;

    fn run_path<R: Rng + ?Sized>(
        &self,
        history: &[HistoryItem],
        path: &[usize],
        targets: &[usize],
        rng: &mut R,
    ) -> Result<SimOutcome> {
        let n = self.num_concepts();
        let mut seen = vec![false; n];
        for &c in path {
            if c >= n {
                return Err(Error::UnknownConcept { id: c, universe: n });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Validation(format!("path repeats concept {c}")));
            }
        }
        let mut state = self.spawn_student(history)?;
        let before = self.exam(&state, targets)?;
        let ceiling = self.ceiling();
        if before >= ceiling {
            return Err(Error::DegenerateEpisode {
                exam_before: before,
                ceiling,
            });
        }
        let feedback = path.iter().map(|&c| self.learn_step(&mut state, c, rng)).collect();
        let after = self.exam(&state, targets)?;
        Ok(SimOutcome {
            exam_before: before,
            exam_after: after,
            ceiling,
            effect: learning_effect(before, after, ceiling)?,
            feedback,
        })
    }
}

/// Validated, immutable synthetic world.
#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn preset(preset: Preset, num_concepts: usize, seed: u64) -> Result<Self> {
        Self::new(WorldConfig::preset(preset, num_concepts, seed))
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    fn check(&self, c: usize) -> Result<()> {
        if c >= self.config.num_concepts {
            Err(Error::UnknownConcept {
                id: c,
                universe: self.config.num_concepts,
            })
        } else {
            Ok(())
        }
    }

    fn decay_all(&self, state: &mut StudentState) {
        let d = self.config.decay;
        if d != 1.0 {
            state.mastery.iter_mut().for_each(|m| *m *= d);
        }
    }

    /// Probability-like gate on how much of a study step sticks.
    pub fn readiness(&self, state: &StudentState, concept: usize) -> f64 {
        let cfg = &self.config;
        let support: f64 = (0..cfg.num_concepts)
            .map(|a| cfg.influence.get(a, concept) * state.mastery[a])
            .sum();
        sigmoid(cfg.sharpness * support - cfg.difficulty[concept])
    }
}

impl Simulator for World {
    type State = StudentState;

    fn num_concepts(&self) -> usize {
        self.config.num_concepts
    }

    fn is_deterministic(&self) -> bool {
        self.config.noise_std == 0.0 && self.config.feedback == FeedbackMode::Continuous
    }

    fn spawn_student(&self, history: &[HistoryItem]) -> Result<StudentState> {
        let mut state = StudentState {
            mastery: vec![self.config.baseline_mastery; self.config.num_concepts],
        };
        for h in history {
            self.check(h.concept)?;
            if !(0.0..=1.0).contains(&h.mastery) {
                return Err(Error::Validation(format!(
                    "history mastery {} outside [0, 1]",
                    h.mastery
                )));
            }
            let m = &mut state.mastery[h.concept];
            *m = m.max(h.mastery);
            self.decay_all(&mut state);
        }
        Ok(state)
    }

    fn learn_step<R: Rng + ?Sized>(&self, state: &mut StudentState, concept: usize, rng: &mut R) -> f64 {
        let cfg = &self.config;
        let ready = self.readiness(state, concept);
        let current = state.mastery[concept];
        let mut next = current + cfg.base_gain * ready * (1.0 - current);
        if cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_std).expect("noise_std validated");
            next += normal.sample(rng);
        }
        state.mastery[concept] = next.clamp(0.0, 1.0);
        self.decay_all(state);
        let observed = state.mastery[concept];
        match cfg.feedback {
            FeedbackMode::Continuous => observed,
            FeedbackMode::Bernoulli => {
                if rng.random::<f64>() < observed {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn exam(&self, state: &StudentState, targets: &[usize]) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::Validation("exam needs at least one target".into()));
        }
        let mut total = 0.0;
        for &t in targets {
            self.check(t)?;
            total += state.mastery[t];
        }
        Ok(total / targets.len() as f64)
    }
}

/// Number of ordered `n`-selections from `m` items, `m! / (m - n)!`.
pub fn permutation_count(m: usize, n: usize) -> u128 {
    if n > m {
        return 0;
    }
    ((m - n + 1)..=m).map(|v| v as u128).product()
}

/// Visits every ordered `n`-selection of `items` in lexicographic order of
/// the (sorted) items.
pub fn for_each_arrangement(items: &[usize], n: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    let mut used = vec![false; sorted.len()];
    let mut current = Vec::with_capacity(n);
    fn rec(
        sorted: &[usize],
        n: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]) -> Result<()>,
    ) -> Result<()> {
        if current.len() == n {
            return f(current);
        }
        for i in 0..sorted.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            current.push(sorted[i]);
            rec(sorted, n, used, current, f)?;
            current.pop();
            used[i] = false;
        }
        Ok(())
    }
    rec(&sorted, n, &mut used, &mut current, &mut f)
}

/// Best path found by exhaustive search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalPath {
    pub path: Vec<usize>,
    pub effect: f64,
}

/// Every ordered `n`-selection of `candidates` with its learning effect.
pub fn enumerate_effects<S: Simulator>(
    sim: &S,
    history: &[HistoryItem],
    candidates: &[usize],
    n: usize,
    targets: &[usize],
    cap: u64,
) -> Result<Vec<OptimalPath>> {
    if !sim.is_deterministic() {
        return Err(Error::Validation("exhaustive search needs a noise-free world".into()));
    }
    let count = permutation_count(candidates.len(), n);
    if count > cap as u128 {
        return Err(Error::EnumerationCap { paths: count, cap });
    }
    // No randomness is consumed by a deterministic world.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(count as usize);
    for_each_arrangement(candidates, n, |path| {
        let outcome = sim.run_path(history, path, targets, &mut rng)?;
        out.push(OptimalPath {
            path: path.to_vec(),
            effect: outcome.effect,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Exhaustive argmax of the learning effect; ties go to the
/// lexicographically smallest path.
pub fn brute_force_optimal<S: Simulator>(
    sim: &S,
    history: &[HistoryItem],
    candidates: &[usize],
    n: usize,
    targets: &[usize],
    cap: u64,
) -> Result<OptimalPath> {
    let all = enumerate_effects(sim, history, candidates, n, targets, cap)?;
    let mut best: Option<OptimalPath> = None;
    for p in all {
        if best.as_ref().is_none_or(|b| p.effect > b.effect) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::Validation("no path to enumerate".into()))
}
