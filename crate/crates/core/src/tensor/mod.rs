//! Minimal dense numerical core: matrices, a reverse-mode tape, the LSTM
//! cell, and a central-difference gradient checker.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{masked_softmax_values, sigmoid, Gradients, Node, Tape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp used inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Per-position allow flags for [`Tape::masked_softmax`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolMask {
    allowed: Vec<bool>,
}

impl BoolMask {
    pub fn all_allowed(len: usize) -> Self {
        Self {
            allowed: vec![true; len],
        }
    }

    pub fn from_allowed(allowed: Vec<bool>) -> Self {
        Self { allowed }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn is_allowed(&self, i: usize) -> bool {
        self.allowed[i]
    }

    pub fn allow(&mut self, i: usize) {
        self.allowed[i] = true;
    }

    pub fn block(&mut self, i: usize) {
        self.allowed[i] = false;
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Tape handles for one LSTM cell. Gate column order is `i, f, g, o`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `input x 4h`
    pub w_input: Node,
    /// `h x 4h`
    pub w_hidden: Node,
    /// `1 x 4h`
    pub bias: Node,
}

/// `(h, c)` pair of `1 x hidden` rows.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Node,
    pub c: Node,
}

/// One step of a standard LSTM cell:
/// `c' = f * c + i * g`, `h' = o * tanh(c')`.
pub fn lstm_step(
    tape: &mut Tape,
    weights: &LstmWeights,
    input: Node,
    state: LstmState,
) -> Result<LstmState> {
    let hidden = tape.value(state.h).cols();
    let (in_rows, four_h) = tape.value(weights.w_input).shape();
    let x_shape = tape.value(input).shape();
    if x_shape != (1, in_rows) {
        return Err(Error::Dimension {
            op: "lstm_step input",
            left: x_shape,
            right: (1, in_rows),
        });
    }
    if four_h != 4 * hidden || tape.value(state.c).shape() != (1, hidden) {
        return Err(Error::Dimension {
            op: "lstm_step state",
            left: tape.value(state.c).shape(),
            right: (1, four_h / 4),
        });
    }
    let zx = tape.matmul(input, weights.w_input)?;
    let zh = tape.matmul(state.h, weights.w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, weights.bias)?;

    let i = tape.slice_cols(z, 0, hidden)?;
    let f = tape.slice_cols(z, hidden, hidden)?;
    let g = tape.slice_cols(z, 2 * hidden, hidden)?;
    let o = tape.slice_cols(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;

    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: (usize, usize),
    /// Tape and central-difference gradients at the worst entry.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per parameter and must
/// return a scalar node. It has to be deterministic in the parameters; any
/// RNG it uses must be re-seeded on each call.
pub fn grad_check<F>(loss_fn: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Node]) -> Result<Node>,
{
    let eval = |ps: &[Matrix]| -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let leaves = ps
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = loss_fn(&mut tape, &leaves)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check loss"));
        }
        let grads = tape.backward(loss)?;
        Ok((value, leaves.iter().map(|&l| grads.get(l)).collect()))
    };

    let (_, analytic) = eval(params)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.as_slice()[k];
            work[pi].as_mut_slice()[k] = orig + eps;
            let plus = eval(&work)?.0;
            work[pi].as_mut_slice()[k] = orig - eps;
            let minus = eval(&work)?.0;
            work[pi].as_mut_slice()[k] = orig;

            let cd = (plus - minus) / (2.0 * eps);
            let an = analytic[pi].as_slice()[k];
            let abs = (an - cd).abs();
            let rel = abs / an.abs().max(cd.abs()).max(1e-8);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
                report.worst_analytic = an;
                report.worst_numeric = cd;
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
