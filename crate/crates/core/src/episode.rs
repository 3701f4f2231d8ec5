use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One past interaction: the concept studied and the mastery observed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub concept: usize,
    pub mastery: f64,
}

/// One recommendation instance: the student's history, the candidate set
/// the path is drawn from, the target concepts, and the path length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub history: Vec<HistoryItem>,
    pub candidates: Vec<usize>,
    pub targets: Vec<usize>,
    pub path_len: usize,
}

impl Episode {
    pub fn validate(&self, num_concepts: usize) -> Result<()> {
        let check = |id: usize| {
            if id >= num_concepts {
                Err(Error::UnknownConcept {
                    id,
                    universe: num_concepts,
                })
            } else {
                Ok(())
            }
        };
        if self.candidates.is_empty() {
            return Err(Error::Validation("candidate set is empty".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Validation("target set is empty".into()));
        }
        if self.path_len > self.candidates.len() {
            return Err(Error::Validation(format!(
                "path length {} exceeds candidate count {}",
                self.path_len,
                self.candidates.len()
            )));
        }
        let mut seen = vec![false; num_concepts];
        for &c in &self.candidates {
            check(c)?;
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Validation(format!("duplicate candidate {c}")));
            }
        }
        for &t in &self.targets {
            check(t)?;
        }
        for h in &self.history {
            check(h.concept)?;
            if !(0.0..=1.0).contains(&h.mastery) {
                return Err(Error::Validation(format!(
                    "history mastery {} outside [0, 1]",
                    h.mastery
                )));
            }
        }
        Ok(())
    }
}

/// Stable content hash of an episode list, hex encoded.
pub fn episodes_hash(episodes: &[Episode]) -> String {
    let mut hasher = Sha256::new();
    for e in episodes {
        hasher.update(e.path_len.to_le_bytes());
        for list in [&e.candidates, &e.targets] {
            hasher.update(list.len().to_le_bytes());
            for c in list {
                hasher.update(c.to_le_bytes());
            }
        }
        hasher.update(e.history.len().to_le_bytes());
        for h in &e.history {
            hasher.update(h.concept.to_le_bytes());
            hasher.update(h.mastery.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
