//! Non-neural comparison policies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::simulator::{for_each_arrangement, learning_effect, permutation_count, Simulator};

/// A recommended path and the policy that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyOutput {
    pub path: Vec<usize>,
    pub method: &'static str,
}

fn check_size(episode: &Episode) -> Result<()> {
    if episode.path_len > episode.candidates.len() {
        return Err(Error::Validation(format!(
            "path length {} exceeds candidate count {}",
            episode.path_len,
            episode.candidates.len()
        )));
    }
    Ok(())
}

fn require_deterministic<S: Simulator>(sim: &S, who: &str) -> Result<()> {
    if sim.is_deterministic() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{who} policy needs a noise-free world")))
    }
}

/// Uniformly random ordered selection of `path_len` candidates.
pub fn random_policy<R: Rng + ?Sized>(episode: &Episode, rng: &mut R) -> Result<PolicyOutput> {
    check_size(episode)?;
    let mut pool = episode.candidates.clone();
    let (chosen, _) = pool.partial_shuffle(rng, episode.path_len);
    Ok(PolicyOutput {
        path: chosen.to_vec(),
        method: "random",
    })
}

/// Order in which the rule policy arranges its selected concepts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleOrder {
    /// Smallest individual effect first.
    #[default]
    Ascending,
    Descending,
}

/// Learning effect on the targets of studying each candidate alone, in
/// candidate order.
pub fn individual_effects<S: Simulator>(episode: &Episode, sim: &S) -> Result<Vec<(usize, f64)>> {
    let start = sim.spawn_student(&episode.history)?;
    let before = sim.exam(&start, &episode.targets)?;
    // A noise-free world never draws from this.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    episode
        .candidates
        .iter()
        .map(|&c| {
            let mut s = start.clone();
            sim.learn_step(&mut s, c, &mut rng);
            let after = sim.exam(&s, &episode.targets)?;
            Ok((c, learning_effect(before, after, sim.ceiling())?))
        })
        .collect()
}

/// Picks the `path_len` candidates with the largest individual effects and
/// orders them by effect, ties by concept id.
pub fn rule_based_policy<S: Simulator>(episode: &Episode, sim: &S, order: RuleOrder) -> Result<PolicyOutput> {
    check_size(episode)?;
    require_deterministic(sim, "rule-based")?;
    let mut scored = individual_effects(episode, sim)?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(episode.path_len);
    match order {
        RuleOrder::Ascending => scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))),
        RuleOrder::Descending => scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))),
    }
    Ok(PolicyOutput {
        path: scored.into_iter().map(|(c, _)| c).collect(),
        method: "rule",
    })
}

pub const DEFAULT_MPC_ROLLOUTS: usize = 16;

/// Scores closer than this count as tied, so summation order cannot break ties.
const TIE_TOLERANCE: f64 = 1e-12;

/// Receding-horizon search: at every position each unused candidate is
/// scored by the mean final effect of random completions of the rest of the
/// path, and the best one is committed. When every completion fits in the
/// budget they are enumerated instead of sampled.
pub fn mpc_policy<S: Simulator, R: Rng + ?Sized>(
    episode: &Episode,
    sim: &S,
    rollouts_per_step: usize,
    rng: &mut R,
) -> Result<PolicyOutput> {
    check_size(episode)?;
    require_deterministic(sim, "MPC")?;
    if rollouts_per_step == 0 {
        return Err(Error::Validation("MPC needs at least one rollout per step".into()));
    }
    let targets = &episode.targets;
    let mut state = sim.spawn_student(&episode.history)?;
    let before = sim.exam(&state, targets)?;
    let ceiling = sim.ceiling();
    let mut remaining = episode.candidates.clone();
    remaining.sort_unstable();
    let mut path = Vec::with_capacity(episode.path_len);

    // Final effect of continuing from `s` with `tail`.
    let finish = |s: &S::State, tail: &[usize], rng: &mut R| -> Result<f64> {
        let mut s = s.clone();
        for &c in tail {
            sim.learn_step(&mut s, c, rng);
        }
        learning_effect(before, sim.exam(&s, targets)?, ceiling)
    };

    while path.len() < episode.path_len {
        let left = episode.path_len - path.len() - 1;
        let mut best: Option<(usize, f64)> = None;
        for (i, &c) in remaining.iter().enumerate() {
            let mut after = state.clone();
            sim.learn_step(&mut after, c, rng);
            let rest: Vec<usize> = remaining.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &x)| x).collect();
            let score = if permutation_count(rest.len(), left) <= rollouts_per_step as u128 {
                let mut total = 0.0;
                let mut count = 0usize;
                for_each_arrangement(&rest, left, |tail| {
                    total += finish(&after, tail, rng)?;
                    count += 1;
                    Ok(())
                })?;
                total / count as f64
            } else {
                let mut pool = rest.clone();
                let mut total = 0.0;
                for _ in 0..rollouts_per_step {
                    let (tail, _) = pool.partial_shuffle(rng, left);
                    let tail = tail.to_vec();
                    total += finish(&after, &tail, rng)?;
                }
                total / rollouts_per_step as f64
            };
            if best.is_none_or(|(_, b)| score > b + TIE_TOLERANCE) {
                best = Some((i, score));
            }
        }
        let (i, _) = best.expect("candidates remain");
        let c = remaining.remove(i);
        sim.learn_step(&mut state, c, rng);
        path.push(c);
    }
    Ok(PolicyOutput { path, method: "mpc" })
}
