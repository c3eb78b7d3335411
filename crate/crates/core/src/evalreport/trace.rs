use std::path::Path;

use crate::backbones::EarlyClassifier;
use crate::dataio::LabeledSeries;
use crate::error::{Error, Result};
use crate::halting::halting_distribution;
use crate::scalar::Scalar;

/// One time step of an exported trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    /// First channel of the input frame.
    pub x: f64,
    pub probs: Vec<f64>,
    pub delta: f64,
    pub budget: f64,
    pub halt_prob: f64,
}

pub fn trace_rows<T: Scalar>(model: &EarlyClassifier<T>, series: &LabeledSeries<T>) -> Result<Vec<TraceRow>> {
    let pred = model.predict_one(series)?;
    let trace = halting_distribution(&pred.delta)?;
    Ok((0..series.len())
        .map(|t| TraceRow {
            t,
            x: series.frame(t)[0].as_f64(),
            probs: pred.probs_at(t).iter().map(|p| p.as_f64()).collect(),
            delta: trace.delta[t].as_f64(),
            budget: trace.budget[t].as_f64(),
            halt_prob: trace.halt_prob[t].as_f64(),
        })
        .collect())
}

/// CSV with columns `t,x,p_<class>...,delta,budget,halt_prob`, one row per
/// time step. `class_names` labels the probability columns; class indices
/// are used when it is empty.
pub fn export_trace<T: Scalar>(
    model: &EarlyClassifier<T>,
    series: &LabeledSeries<T>,
    class_names: &[String],
    path: &Path,
) -> Result<usize> {
    let rows = trace_rows(model, series)?;
    let c = model.num_classes();
    let names: Vec<String> = if class_names.len() == c {
        class_names.to_vec()
    } else {
        (0..c).map(|i| i.to_string()).collect()
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "x".to_string()];
    header.extend(names.iter().map(|n| format!("p_{n}")));
    header.extend(["delta", "budget", "halt_prob"].map(String::from));
    w.write_record(&header)?;
    for r in &rows {
        let mut fields = vec![r.t.to_string(), r.x.to_string()];
        fields.extend(r.probs.iter().map(|p| p.to_string()));
        fields.extend([r.delta.to_string(), r.budget.to_string(), r.halt_prob.to_string()]);
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneConfig, LstmConfig, ModelConfig};

    #[test]
    fn exported_trace_is_a_distribution() {
        let model: EarlyClassifier<f64> = EarlyClassifier::new(ModelConfig {
            backbone: BackboneConfig::Lstm(LstmConfig {
                num_layers: 1,
                hidden_dim: 4,
                input_dim: 1,
            }),
            num_classes: 2,
            init_seed: 1,
        })
        .unwrap();
        let s = LabeledSeries::univariate(vec![0.1, 0.5, -0.3, 0.8, 0.0], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(export_trace(&model, &s, &names, &path).unwrap(), 5);
        let first = std::fs::read(&path).unwrap();
        export_trace(&model, &s, &names, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);

        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(
            r.headers().unwrap().iter().collect::<Vec<_>>(),
            vec!["t", "x", "p_a", "p_b", "delta", "budget", "halt_prob"]
        );
        let total: f64 = r.records().map(|row| row.unwrap()[6].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
