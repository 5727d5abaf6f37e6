//! Score protocols mapping logits to scores, and the per-row shift
//! demonstration: softmax scores (and any KL loss built on them) cannot see
//! a constant added to every logit of a position, while sigmoid scores can.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::numerics::{log_sum_exp, sigmoid, Grid2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Sigmoid,
    Softmax,
}

/// Scores produced from a logit map, tagged with the protocol that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    scores: Grid2,
    protocol: Protocol,
}

impl ScoreMap {
    pub fn scores(&self) -> &Grid2 {
        &self.scores
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn into_grid(self) -> Grid2 {
        self.scores
    }
}

/// Independent per-class binary scores.
pub fn sigmoid_protocol(logits: &Grid2) -> Result<ScoreMap> {
    logits.expect_finite("logits")?;
    Ok(ScoreMap {
        scores: logits.map(sigmoid),
        protocol: Protocol::Sigmoid,
    })
}

/// Row-normalized class distribution. Needs at least two classes.
pub fn softmax_protocol(logits: &Grid2) -> Result<ScoreMap> {
    logits.expect_finite("logits")?;
    if logits.cols() < 2 {
        return Err(Error::invalid(
            "softmax over a single column is degenerate",
        ));
    }
    let mut scores = logits.clone();
    for i in 0..logits.rows() {
        let row = scores.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ScoreMap {
        scores,
        protocol: Protocol::Softmax,
    })
}

/// Row-wise `log softmax`.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| v - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub kl_loss: f64,
    pub sigmoid_l1_gap_per_row: Vec<f64>,
    pub argmax_preserved_per_row: Vec<bool>,
}

impl DemoReport {
    pub fn total_sigmoid_gap(&self) -> f64 {
        self.sigmoid_l1_gap_per_row.iter().sum()
    }
}

/// Adds `shift[i]` to every logit in row `i`.
pub fn shift_rows(logits: &Grid2, shift: &[f64]) -> Result<Grid2> {
    if shift.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "shift has {} entries but logits have {} rows",
            shift.len(),
            logits.rows()
        )));
    }
    if shift.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("shift contains non-finite values"));
    }
    let mut out = logits.clone();
    for (i, &c) in shift.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v += c);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Builds student logits `teacher + shift` (per-row constants) and reports
/// the softmax-KL loss between the pair next to the sigmoid score gap.
pub fn inconsistency_demo(teacher_logits: &Grid2, shift: &[f64]) -> Result<DemoReport> {
    let student_logits = shift_rows(teacher_logits, shift)?;
    let kl = losses::kl_distill_loss(&student_logits, teacher_logits)?;

    let teacher_sig = sigmoid_protocol(teacher_logits)?;
    let student_sig = sigmoid_protocol(&student_logits)?;
    let sigmoid_l1_gap_per_row = teacher_sig
        .scores()
        .iter_rows()
        .zip(student_sig.scores().iter_rows())
        .map(|(t, s)| t.iter().zip(s).map(|(a, b)| (a - b).abs()).sum())
        .collect();

    let argmax_preserved_per_row = teacher_logits
        .iter_rows()
        .zip(student_logits.iter_rows())
        .map(|(t, s)| argmax(t) == argmax(s))
        .collect();

    Ok(DemoReport {
        kl_loss: kl.value,
        sigmoid_l1_gap_per_row,
        argmax_preserved_per_row,
    })
}
