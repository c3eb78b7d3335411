//! Cost and loss formulas.
//!
//! The evaluation cost of a decision is `α·[ŷ ≠ y] + (1−α)·t/T`. Training
//! approximates it per prefix with `L_t = α·(1 − ŷ⁺_t) + (1−α)·t/T` and
//! takes the expectation of `L_t` under the halting distribution. The
//! pre-training phase instead averages cross-entropy uniformly over all
//! prefixes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{check_segments, NodeId, Segment, Tape};
use crate::scalar::Scalar;

/// Weight of the classification term against the earliness term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TradeOff(f64);

impl TradeOff {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(TradeOff(alpha))
        } else {
            Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")))
        }
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for TradeOff {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        TradeOff::new(v)
    }
}

impl From<TradeOff> for f64 {
    fn from(t: TradeOff) -> f64 {
        t.0
    }
}

/// One hard decision: class chosen at index `t` of a series whose last index
/// is `last`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub predicted: usize,
    pub truth: usize,
    pub t: usize,
    pub last: usize,
}

/// `t/T`, defined as 0 for a single-step series.
pub fn earliness_loss(t: usize, last: usize) -> f64 {
    if last == 0 {
        0.0
    } else {
        t as f64 / last as f64
    }
}

pub fn evaluation_cost(o: &DecisionOutcome, a: TradeOff) -> f64 {
    let miss = if o.predicted != o.truth { 1.0 } else { 0.0 };
    a.alpha() * miss + (1.0 - a.alpha()) * earliness_loss(o.t, o.last)
}

/// `t/T` for every row of a stacked batch.
pub fn earliness_targets<T: Scalar>(segments: &[Segment]) -> Vec<T> {
    let mut out = Vec::with_capacity(segments.last().map_or(0, |s| s.end()));
    for s in segments {
        let last = s.len - 1;
        out.extend((0..s.len).map(|t| T::lit(earliness_loss(t, last))));
    }
    out
}

/// Repeats each series label over its rows.
pub fn row_labels(segments: &[Segment], labels: &[usize]) -> Vec<usize> {
    segments
        .iter()
        .zip(labels)
        .flat_map(|(s, &y)| std::iter::repeat_n(y, s.len))
        .collect()
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&y) => Err(Error::Index {
            op: "class label",
            index: y,
            len: classes,
        }),
        None => Ok(()),
    }
}

/// `1 − ŷ[y]` for every row of a probability matrix `[R×C]`.
pub fn linear_class_loss<T: Scalar>(tape: &mut Tape<T>, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (_, c) = tape.value(probs).shape().as_rows_cols();
    check_labels(labels, c)?;
    let picked = tape.gather_cols(probs, labels)?;
    let n = labels.len();
    tape.affine(picked, -T::one(), &vec![T::one(); n])
}

/// `−log ŷ[y]` for every row, computed from logits via log-sum-exp.
pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (_, c) = tape.value(logits).shape().as_rows_cols();
    check_labels(labels, c)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.gather_cols(logp, labels)?;
    Ok(tape.scale(picked, -T::one()))
}

/// `α·class_loss + (1−α)·earliness` row by row.
pub fn decision_loss<T: Scalar>(
    tape: &mut Tape<T>,
    class_loss: NodeId,
    earliness: &[T],
    a: TradeOff,
) -> Result<NodeId> {
    let alpha = T::lit(a.alpha());
    let shift: Vec<T> = earliness.iter().map(|&e| (T::one() - alpha) * e).collect();
    tape.affine(class_loss, alpha, &shift)
}

/// `Σ_t P(t)·L_t` for a single series (or any rows sharing one weight).
pub fn expected_loss<T: Scalar>(tape: &mut Tape<T>, decision: NodeId, halt_prob: NodeId) -> Result<NodeId> {
    let weighted = tape.mul(halt_prob, decision)?;
    Ok(tape.sum(weighted))
}

/// Plain-number form of the halting-weighted loss, for reference checks.
pub fn expected_loss_value(class_loss: &[f64], halt_prob: &[f64], a: TradeOff) -> Result<f64> {
    if class_loss.len() != halt_prob.len() || halt_prob.is_empty() {
        return Err(Error::dim("expected_loss", &[class_loss.len()], &[halt_prob.len()]));
    }
    let last = halt_prob.len() - 1;
    Ok(halt_prob
        .iter()
        .zip(class_loss)
        .enumerate()
        .map(|(t, (&p, &lc))| p * (a.alpha() * lc + (1.0 - a.alpha()) * earliness_loss(t, last)))
        .sum())
}

/// Batch loss with its two logged components.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    /// Scalar node to differentiate.
    pub total: NodeId,
    /// Batch mean of the (weighted) classification part.
    pub cls: f64,
    /// Batch mean of the (weighted) earliness part.
    pub earliness: f64,
}

fn series_means<T: Scalar>(values: &[T], weights: &[T], segments: &[Segment]) -> f64 {
    let b = segments.len() as f64;
    segments
        .iter()
        .map(|s| {
            s.range()
                .map(|i| values[i].as_f64() * weights[i].as_f64())
                .sum::<f64>()
        })
        .sum::<f64>()
        / b
}

/// Pre-training objective: the uniform-prefix expectation of cross-entropy,
/// i.e. the mean over series of the mean over prefixes.
pub fn uniform_prefix_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
    segments: &[Segment],
) -> Result<BatchLoss> {
    check_segments(segments, tape.value(logits).shape().as_rows_cols().0, "uniform_prefix_cross_entropy")?;
    let rows = row_labels(segments, labels);
    let ce = cross_entropy_loss(tape, logits, &rows)?;
    let b = segments.len() as f64;
    let mut weights = Vec::with_capacity(rows.len());
    for s in segments {
        weights.extend(std::iter::repeat_n(T::lit(1.0 / (b * s.len as f64)), s.len));
    }
    let total = tape.weighted_sum(ce, &weights)?;
    let uniform: Vec<T> = segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(T::lit(1.0 / s.len as f64), s.len))
        .collect();
    let earl = series_means(&earliness_targets::<T>(segments), &uniform, segments);
    Ok(BatchLoss {
        total,
        cls: tape.value(total).data()[0].as_f64(),
        earliness: earl,
    })
}

/// Fine-tuning objective: batch mean of `Σ_t P(t)·[α·(1−ŷ⁺_t) + (1−α)·t/T]`.
pub fn halting_weighted_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: NodeId,
    halt_prob: NodeId,
    labels: &[usize],
    segments: &[Segment],
    a: TradeOff,
) -> Result<BatchLoss> {
    check_segments(segments, tape.value(halt_prob).len(), "halting_weighted_loss")?;
    let rows = row_labels(segments, labels);
    let lc = linear_class_loss(tape, probs, &rows)?;
    let le = earliness_targets::<T>(segments);
    let lt = decision_loss(tape, lc, &le, a)?;
    let weighted = tape.mul(halt_prob, lt)?;
    let b = T::lit(segments.len() as f64);
    let weights = vec![T::one() / b; rows.len()];
    let total = tape.weighted_sum(weighted, &weights)?;
    let p = tape.value(halt_prob).data().to_vec();
    let cls = series_means(tape.value(lc).data(), &p, segments);
    let earliness = series_means(&le, &p, segments);
    Ok(BatchLoss { total, cls, earliness })
}
