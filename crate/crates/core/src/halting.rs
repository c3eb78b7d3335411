//! Learned stopping head and the halting distribution it induces.
//!
//! A stop probability `δ_t ∈ (0,1)` is produced from each hidden state. The
//! probability of deciding at `t` is `P(t) = δ_t · B_{t−1}` where the budget
//! `B_t = ∏_{τ≤t}(1 − δ_τ)` starts at one. The final step always consumes
//! the remaining budget (`δ_T = 1`), so `P` is a distribution over
//! `0..=T`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{NodeId, Segment, Tape, HALT_CLAMP};
use crate::scalar::Scalar;

/// Bias written into the stopping head by [`init_late`].
pub const LATE_BIAS: f64 = -5.0;

/// Per-step stop probabilities, remaining budget and halting distribution of
/// one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingTrace<T> {
    /// Stop probabilities after the terminal override (last entry is 1).
    pub delta: Vec<T>,
    /// `B_t` after step `t`; the last entry is exactly zero.
    pub budget: Vec<T>,
    /// `P(t)`.
    pub halt_prob: Vec<T>,
}

impl<T: Scalar> HaltingTrace<T> {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// `Σ_t t · P(t)`.
    pub fn expected_time(&self) -> T {
        self.halt_prob
            .iter()
            .enumerate()
            .map(|(t, &p)| T::lit(t as f64) * p)
            .sum()
    }

    /// Writes `t,delta,budget,halt_prob` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "delta", "budget", "halt_prob"])?;
        for t in 0..self.len() {
            w.write_record([
                t.to_string(),
                self.delta[t].to_string(),
                self.budget[t].to_string(),
                self.halt_prob[t].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Halting distribution for one sequence of stop probabilities.
///
/// The last entry is replaced by 1. The others are clamped to
/// `[1e-7, 1 − 1e-7]` inside the products, matching [`Tape::halting`]
/// bit for bit.
pub fn halting_distribution<T: Scalar>(delta: &[T]) -> Result<HaltingTrace<T>> {
    if delta.is_empty() {
        return Err(Error::Argument("halting distribution of an empty sequence".into()));
    }
    if let Some(bad) = delta.iter().find(|d| !(**d >= T::zero() && **d <= T::one())) {
        return Err(Error::Argument(format!("stop probability {bad} outside [0, 1]")));
    }
    let n = delta.len();
    let lo = T::lit(HALT_CLAMP);
    let hi = T::one() - lo;
    let mut out_delta = delta.to_vec();
    out_delta[n - 1] = T::one();
    let mut budget = Vec::with_capacity(n);
    let mut halt_prob = Vec::with_capacity(n);
    let mut remaining = T::one();
    for &d in &delta[..n - 1] {
        let dc = d.max(lo).min(hi);
        halt_prob.push(dc * remaining);
        remaining *= T::one() - dc;
        budget.push(remaining);
    }
    halt_prob.push(remaining);
    budget.push(T::zero());
    Ok(HaltingTrace {
        delta: out_delta,
        budget,
        halt_prob,
    })
}

/// How a hard stopping time is drawn from a trace at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StopMode {
    /// Walk forward drawing `stop ~ Bernoulli(δ_t)`.
    Bernoulli,
    /// First step with `δ_t ≥ 0.5`.
    Threshold,
    /// `round(Σ t·P(t))`.
    Expected,
}

impl std::fmt::Display for StopMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopMode::Bernoulli => "bernoulli",
            StopMode::Threshold => "threshold",
            StopMode::Expected => "expected",
        })
    }
}

/// Stopping index in `0..trace.len()`.
pub fn sample_stop<T: Scalar, R: Rng + ?Sized>(trace: &HaltingTrace<T>, mode: StopMode, rng: &mut R) -> usize {
    let last = trace.len().saturating_sub(1);
    match mode {
        StopMode::Bernoulli => trace
            .delta
            .iter()
            .position(|d| rng.random::<f64>() < d.as_f64())
            .unwrap_or(last),
        StopMode::Threshold => trace
            .delta
            .iter()
            .position(|d| *d >= T::lit(0.5))
            .unwrap_or(last),
        StopMode::Expected => {
            let e = trace.expected_time().as_f64().round();
            (e.max(0.0) as usize).min(last)
        }
    }
}

/// `δ = σ(h · weight + bias)` for one hidden vector or a stack of them.
/// A stacked `[R×H]` input yields `[R]` stop probabilities.
pub fn stop_probability<T: Scalar>(tape: &mut Tape<T>, h: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let z = tape.linear(h, weight, bias)?;
    let s = tape.sigmoid(z);
    let n = tape.value(s).len();
    tape.reshape(s, &[n])
}

/// Differentiable halting distribution of every segment in a stacked `[R]`
/// vector of stop probabilities.
pub fn halting_probabilities<T: Scalar>(tape: &mut Tape<T>, delta: NodeId, segments: &[Segment]) -> Result<NodeId> {
    tape.halting(delta, segments)
}

/// Zeroes the stopping weights and sets the bias to [`LATE_BIAS`], which
/// concentrates the initial halting mass on the last step.
pub fn init_late<T: Scalar>(weight: &mut [T], bias: &mut [T]) {
    weight.iter_mut().for_each(|w| *w = T::zero());
    bias.iter_mut().for_each(|b| *b = T::lit(LATE_BIAS));
}
