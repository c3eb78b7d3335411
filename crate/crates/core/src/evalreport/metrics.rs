use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{EarlyClassifier, SeriesPrediction};
use crate::dataio::LabeledSeries;
use crate::error::{Error, Result};
use crate::halting::{halting_distribution, sample_stop, StopMode};
use crate::objective::{earliness_loss, evaluation_cost, DecisionOutcome, TradeOff};
use crate::scalar::{pairwise_mean, Scalar};

/// Aggregate scores of one model on one dataset at one trade-off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub alpha: f64,
    pub accuracy: f64,
    /// Mean of `t_stop / T`.
    pub earliness: f64,
    /// Mean of the per-series evaluation cost.
    pub mean_cost: f64,
    pub stop_mode: StopMode,
    pub seed: u64,
    pub num_series: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesOutcome {
    pub index: usize,
    pub truth: usize,
    pub predicted: usize,
    pub t_stop: usize,
    pub last: usize,
    pub earliness: f64,
    pub cost: f64,
}

/// Scores precomputed per-prefix outputs. Series `i` draws its stop from
/// stream `i` of a generator seeded with `seed`, so the record does not
/// depend on evaluation order.
pub fn evaluate_predictions<T: Scalar>(
    dataset: &str,
    predictions: &[SeriesPrediction<T>],
    series: &[&LabeledSeries<T>],
    alpha: TradeOff,
    mode: StopMode,
    seed: u64,
) -> Result<(EvalRecord, Vec<SeriesOutcome>)> {
    if predictions.len() != series.len() {
        return Err(Error::dim("evaluate", &[predictions.len()], &[series.len()]));
    }
    if series.is_empty() {
        return Err(Error::Argument("evaluation over an empty set".into()));
    }
    let mut outcomes = Vec::with_capacity(series.len());
    for (index, (pred, s)) in predictions.iter().zip(series).enumerate() {
        if pred.len() != s.len() {
            return Err(Error::dim("evaluate", &[pred.len()], &[s.len()]));
        }
        if s.label >= pred.num_classes {
            return Err(Error::Argument(format!(
                "series {index} has class {} but the model knows {} classes",
                s.label, pred.num_classes
            )));
        }
        let trace = halting_distribution(&pred.delta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let t_stop = sample_stop(&trace, mode, &mut rng);
        let o = DecisionOutcome {
            predicted: pred.predicted_at(t_stop),
            truth: s.label,
            t: t_stop,
            last: s.last_index(),
        };
        outcomes.push(SeriesOutcome {
            index,
            truth: o.truth,
            predicted: o.predicted,
            t_stop,
            last: o.last,
            earliness: earliness_loss(t_stop, o.last),
            cost: evaluation_cost(&o, alpha),
        });
    }
    let hits: Vec<f64> = outcomes
        .iter()
        .map(|o| if o.predicted == o.truth { 1.0 } else { 0.0 })
        .collect();
    let earl: Vec<f64> = outcomes.iter().map(|o| o.earliness).collect();
    let cost: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let record = EvalRecord {
        dataset: dataset.to_string(),
        alpha: alpha.alpha(),
        accuracy: pairwise_mean(&hits),
        earliness: pairwise_mean(&earl),
        mean_cost: pairwise_mean(&cost),
        stop_mode: mode,
        seed,
        num_series: outcomes.len(),
    };
    Ok((record, outcomes))
}

/// Runs the model on every series and scores the sampled decisions.
pub fn evaluate<T: Scalar>(
    model: &EarlyClassifier<T>,
    dataset: &str,
    series: &[LabeledSeries<T>],
    alpha: TradeOff,
    mode: StopMode,
    seed: u64,
) -> Result<(EvalRecord, Vec<SeriesOutcome>)> {
    let refs: Vec<&LabeledSeries<T>> = series.iter().collect();
    let preds = model.predict(&refs)?;
    evaluate_predictions(dataset, &preds, &refs, alpha, mode, seed)
}

/// Fraction classified correctly after the whole series is observed.
pub fn final_accuracy<T: Scalar>(predictions: &[SeriesPrediction<T>], series: &[&LabeledSeries<T>]) -> f64 {
    let hits: Vec<f64> = predictions
        .iter()
        .zip(series)
        .map(|(p, s)| if p.predicted_at(p.len() - 1) == s.label { 1.0 } else { 0.0 })
        .collect();
    pairwise_mean(&hits)
}

/// Writes records as a pretty JSON array.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a report holding either one record, an array of records or an
/// object with a `records` array.
pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let inner = match value {
        serde_json::Value::Object(ref map) if map.contains_key("records") => map["records"].clone(),
        other => other,
    };
    if inner.is_array() {
        Ok(serde_json::from_value(inner)?)
    } else {
        Ok(vec![serde_json::from_value(inner)?])
    }
}
