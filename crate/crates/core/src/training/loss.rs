use crate::error::{Error, Result};
use crate::tensor::{Node, Tape, PROB_EPS};

/// `-advantage * sum(log p)`: the REINFORCE surrogate for one path.
pub fn policy_loss(tape: &mut Tape, logprobs: &[Node], advantage: f64) -> Result<Node> {
    let total = tape.sum_scalars(logprobs)?;
    tape.scale(total, -advantage)
}

/// Summed binary cross-entropy of the per-step mastery predictions against
/// the simulator's observed feedback.
pub fn kt_loss(tape: &mut Tape, predictions: &[Node], feedback: &[f64]) -> Result<Node> {
    if predictions.len() != feedback.len() {
        return Err(Error::Validation(format!(
            "{} predictions but {} feedback values",
            predictions.len(),
            feedback.len()
        )));
    }
    let terms = predictions
        .iter()
        .zip(feedback)
        .map(|(&p, &y)| tape.bce(p, y, PROB_EPS))
        .collect::<Result<Vec<_>>>()?;
    tape.sum_scalars(&terms)
}

/// `l2 * sum ||W||^2` over the given parameter nodes.
pub fn l2_penalty(tape: &mut Tape, params: &[Node], l2: f64) -> Result<Node> {
    let norms = params
        .iter()
        .map(|&p| tape.squared_norm(p))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.sum_scalars(&norms)?;
    tape.scale(total, l2)
}

/// Parts of one episode's objective.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeLoss {
    pub policy: Node,
    pub kt: Node,
    /// `policy + beta * kt`.
    pub combined: Node,
}

pub fn episode_loss(
    tape: &mut Tape,
    logprobs: &[Node],
    predictions: &[Node],
    advantage: f64,
    feedback: &[f64],
    beta: f64,
) -> Result<EpisodeLoss> {
    let policy = policy_loss(tape, logprobs, advantage)?;
    let kt = kt_loss(tape, predictions, feedback)?;
    let weighted = tape.scale(kt, beta)?;
    let combined = tape.add(policy, weighted)?;
    Ok(EpisodeLoss { policy, kt, combined })
}
