use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, HistoryItem};
use crate::error::{Error, Result};
use crate::rng::{domain, stream_rng};
use crate::simulator::Simulator;

/// Where the candidate set of each episode comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// One fixed subset shared by every episode.
    Fixed = 0,
    /// Concepts are split into disjoint groups; each episode uses one group.
    Partitioned = 1,
    /// A fresh random subset per episode.
    RandomSubset = 2,
    /// Every concept is a candidate.
    Full = 3,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Fixed,
        Scenario::Partitioned,
        Scenario::RandomSubset,
        Scenario::Full,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Scenario {
    type Error = Error;

    fn try_from(p: u8) -> Result<Self> {
        Scenario::ALL
            .get(p as usize)
            .copied()
            .ok_or_else(|| Error::Validation(format!("scenario {p} is not one of 0..=3")))
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.index()
    }
}

/// Which held-apart episode stream to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn domain(self) -> u64 {
        match self {
            Split::Train => domain::TRAIN_EPISODE,
            Split::Eval => domain::EVAL_EPISODE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub scenario: Scenario,
    pub path_len: usize,
    /// Candidate set size; defaults to `path_len`. Ignored for [`Scenario::Full`].
    pub candidate_size: Option<usize>,
    pub max_history: usize,
    pub max_targets: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Fixed,
            path_len: 20,
            candidate_size: None,
            max_history: 10,
            max_targets: 3,
        }
    }
}

const MAX_RESAMPLES: usize = 1000;

/// Draws episodes for one scenario. Episode `i` of a split depends only on
/// `(seed, split, i)`.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    config: SamplerConfig,
    num_concepts: usize,
    candidate_size: usize,
    fixed: Vec<usize>,
    groups: Vec<Vec<usize>>,
    seed: u64,
}

impl EpisodeSampler {
    pub fn new(num_concepts: usize, config: SamplerConfig, seed: u64) -> Result<Self> {
        let n = config.path_len;
        let m = match config.scenario {
            Scenario::Full => num_concepts,
            _ => config.candidate_size.unwrap_or(n),
        };
        if n == 0 {
            return Err(Error::Validation("path length must be >= 1".into()));
        }
        if m < n || m > num_concepts {
            return Err(Error::Validation(format!(
                "candidate size {m} must lie in [path length {n}, concept count {num_concepts}]"
            )));
        }
        if config.max_targets == 0 {
            return Err(Error::Validation("max_targets must be >= 1".into()));
        }
        let mut rng = stream_rng(seed, domain::SCENARIO, 0);
        let mut ids: Vec<usize> = (0..num_concepts).collect();
        ids.shuffle(&mut rng);
        let mut fixed = Vec::new();
        let mut groups = Vec::new();
        match config.scenario {
            Scenario::Fixed => {
                fixed = ids[..m].to_vec();
                fixed.sort_unstable();
            }
            Scenario::Partitioned => {
                groups = ids
                    .chunks_exact(m)
                    .map(|c| {
                        let mut g = c.to_vec();
                        g.sort_unstable();
                        g
                    })
                    .collect();
            }
            Scenario::RandomSubset | Scenario::Full => {}
        }
        Ok(Self {
            config,
            num_concepts,
            candidate_size: m,
            fixed,
            groups,
            seed,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn candidate_size(&self) -> usize {
        self.candidate_size
    }

    /// Candidate groups of the partitioned scenario.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    fn candidates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        match self.config.scenario {
            Scenario::Fixed => self.fixed.clone(),
            Scenario::Partitioned => self.groups.choose(rng).expect("at least one group").clone(),
            Scenario::RandomSubset => {
                let mut c = rand::seq::index::sample(rng, self.num_concepts, self.candidate_size).into_vec();
                c.sort_unstable();
                c
            }
            Scenario::Full => (0..self.num_concepts).collect(),
        }
    }

    /// Target set: 1 to `max_targets` distinct concepts drawn from the
    /// candidates, so every target can be moved by some path.
    fn targets<R: Rng + ?Sized>(&self, candidates: &[usize], rng: &mut R) -> Vec<usize> {
        let k = rng.random_range(1..=self.config.max_targets.min(candidates.len()));
        candidates.choose_multiple(rng, k).copied().collect()
    }

    /// History: a random walk of independent concept draws with the
    /// simulator's observed feedback.
    fn history<S: Simulator, R: Rng + ?Sized>(&self, sim: &S, rng: &mut R) -> Result<Vec<HistoryItem>> {
        let len = rng.random_range(0..=self.config.max_history);
        let mut state = sim.spawn_student(&[])?;
        let mut history = Vec::with_capacity(len);
        for _ in 0..len {
            let concept = rng.random_range(0..self.num_concepts);
            let mastery = sim.learn_step(&mut state, concept, rng);
            history.push(HistoryItem { concept, mastery });
        }
        Ok(history)
    }

    pub fn sample<S: Simulator>(&self, sim: &S, split: Split, index: u64) -> Result<Episode> {
        if sim.num_concepts() != self.num_concepts {
            return Err(Error::Validation(format!(
                "sampler built for {} concepts, simulator has {}",
                self.num_concepts,
                sim.num_concepts()
            )));
        }
        let mut rng = stream_rng(self.seed, split.domain(), index);
        for _ in 0..MAX_RESAMPLES {
            let candidates = self.candidates(&mut rng);
            let targets = self.targets(&candidates, &mut rng);
            let history = self.history(sim, &mut rng)?;
            let state = sim.spawn_student(&history)?;
            if sim.exam(&state, &targets)? >= sim.ceiling() {
                continue;
            }
            return Ok(Episode {
                history,
                candidates,
                targets,
                path_len: self.config.path_len,
            });
        }
        Err(Error::Validation("could not draw a non-degenerate episode".into()))
    }

    /// Episodes `start..start + count` of a split.
    pub fn batch<S: Simulator>(&self, sim: &S, split: Split, start: u64, count: usize) -> Result<Vec<Episode>> {
        (0..count as u64).map(|i| self.sample(sim, split, start + i)).collect()
    }
}
