use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::EvalRecord;
use crate::error::{Error, Result};

/// Relative gap below which two costs count as equal.
const TIE_TOLERANCE: f64 = 1e-12;

/// Same-parameter tolerance when matching trade-offs and native parameters.
const PARAM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetitorRow {
    pub method: String,
    pub dataset: String,
    pub param: f64,
    pub accuracy: f64,
    pub earliness: f64,
}

/// Published results of one competing method.
#[derive(Clone, Debug, PartialEq)]
pub struct CompetitorTable {
    pub method: String,
    pub rows: Vec<CompetitorRow>,
}

impl CompetitorTable {
    /// Rows run with the native parameter matching trade-off `alpha`.
    pub fn at_alpha(&self, alpha: f64) -> Result<Vec<&CompetitorRow>> {
        let param = competitor_param(&self.method, alpha).ok_or_else(|| {
            Error::Argument(format!("no parameter of {} corresponds to alpha {alpha}", self.method))
        })?;
        Ok(self
            .rows
            .iter()
            .filter(|r| (r.param - param).abs() <= PARAM_TOLERANCE)
            .collect())
    }
}

/// Native parameter of a competitor run that matches trade-off `alpha`.
/// SR2-CF2 is tuned by the trade-off itself; the others use the parameter
/// values paired with alpha in 0.6/0.7/0.8/0.9. Unknown methods are assumed
/// to report by alpha.
pub fn competitor_param(method: &str, alpha: f64) -> Option<f64> {
    const ALPHAS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];
    let table: &[f64; 4] = match method.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
        "relclass" => &[0.001, 0.1, 0.5, 0.9],
        "edsc" => &[2.5, 3.0, 3.5, 3.5],
        "ects" => &[0.1, 0.2, 0.4, 0.8],
        _ => return Some(alpha),
    };
    ALPHAS
        .iter()
        .position(|a| (a - alpha).abs() <= PARAM_TOLERANCE)
        .map(|i| table[i])
}

/// Reads `method,dataset,param,accuracy,earliness` rows, grouped by method
/// in first-seen order.
pub fn load_competitors(path: &Path) -> Result<Vec<CompetitorTable>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut tables: Vec<CompetitorTable> = Vec::new();
    for (i, row) in reader.deserialize::<CompetitorRow>().enumerate() {
        let row = row?;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg,
        };
        if !(0.0..=1.0).contains(&row.accuracy) || !(0.0..=1.0).contains(&row.earliness) {
            return Err(bad(format!(
                "accuracy {} / earliness {} must be fractions in [0, 1]",
                row.accuracy, row.earliness
            )));
        }
        let table = match tables.iter_mut().position(|t| t.method == row.method) {
            Some(k) => &mut tables[k],
            None => {
                tables.push(CompetitorTable {
                    method: row.method.clone(),
                    rows: Vec::new(),
                });
                tables.last_mut().unwrap()
            }
        };
        if table
            .rows
            .iter()
            .any(|r| r.dataset == row.dataset && (r.param - row.param).abs() <= PARAM_TOLERANCE)
        {
            return Err(bad(format!("duplicate row for {} / {} at {}", row.method, row.dataset, row.param)));
        }
        table.rows.push(row);
    }
    Ok(tables)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetComparison {
    pub dataset: String,
    pub ours_cost: f64,
    pub theirs_cost: f64,
    pub outcome: Outcome,
}

/// Win/loss/tie counts of our records against one competitor at one
/// trade-off. Datasets present on one side only are listed, not counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domination {
    pub method: String,
    pub alpha: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub datasets: Vec<DatasetComparison>,
    pub unmatched_ours: Vec<String>,
    pub unmatched_theirs: Vec<String>,
}

fn cost(alpha: f64, accuracy: f64, earliness: f64) -> f64 {
    alpha * (1.0 - accuracy) + (1.0 - alpha) * earliness
}

fn compare_costs(ours: f64, theirs: f64) -> Outcome {
    if (ours - theirs).abs() <= TIE_TOLERANCE * ours.abs().max(theirs.abs()) {
        Outcome::Tie
    } else if ours < theirs {
        Outcome::Win
    } else {
        Outcome::Loss
    }
}

fn ours_by_dataset(ours: &[EvalRecord], alpha: f64) -> Result<BTreeMap<&str, &EvalRecord>> {
    let mut map = BTreeMap::new();
    for r in ours.iter().filter(|r| (r.alpha - alpha).abs() <= PARAM_TOLERANCE) {
        if map.insert(r.dataset.as_str(), r).is_some() {
            return Err(Error::Argument(format!(
                "two records for dataset {} at alpha {alpha}",
                r.dataset
            )));
        }
    }
    Ok(map)
}

/// Both sides are scored with `α·(1−accuracy) + (1−α)·earliness`.
pub fn domination_table(ours: &[EvalRecord], theirs: &CompetitorTable, alpha: f64) -> Result<Domination> {
    let mine = ours_by_dataset(ours, alpha)?;
    let other: BTreeMap<&str, &CompetitorRow> =
        theirs.at_alpha(alpha)?.into_iter().map(|r| (r.dataset.as_str(), r)).collect();
    let mut out = Domination {
        method: theirs.method.clone(),
        alpha,
        wins: 0,
        losses: 0,
        ties: 0,
        datasets: Vec::new(),
        unmatched_ours: Vec::new(),
        unmatched_theirs: Vec::new(),
    };
    for (name, rec) in &mine {
        let Some(row) = other.get(name) else {
            out.unmatched_ours.push(name.to_string());
            continue;
        };
        let ours_cost = cost(alpha, rec.accuracy, rec.earliness);
        let theirs_cost = cost(alpha, row.accuracy, row.earliness);
        let outcome = compare_costs(ours_cost, theirs_cost);
        match outcome {
            Outcome::Win => out.wins += 1,
            Outcome::Loss => out.losses += 1,
            Outcome::Tie => out.ties += 1,
        }
        out.datasets.push(DatasetComparison {
            dataset: name.to_string(),
            ours_cost,
            theirs_cost,
            outcome,
        });
    }
    out.unmatched_theirs = other
        .keys()
        .filter(|k| !mine.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    Ok(out)
}

/// Long-format CSV `dataset,alpha,metric,ours,theirs` with metrics
/// accuracy, earliness and cost for every dataset and trade-off present on
/// both sides. Returns the number of data rows.
pub fn export_scatter(ours: &[EvalRecord], theirs: &CompetitorTable, path: &Path) -> Result<usize> {
    let mut alphas: Vec<f64> = ours.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup_by(|a, b| (*a - *b).abs() <= PARAM_TOLERANCE);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "alpha", "metric", "ours", "theirs"])?;
    let mut rows = 0;
    for alpha in alphas {
        let Ok(other) = theirs.at_alpha(alpha) else {
            continue;
        };
        let mine = ours_by_dataset(ours, alpha)?;
        let mut matched: Vec<(&EvalRecord, &CompetitorRow)> = other
            .iter()
            .filter_map(|row| mine.get(row.dataset.as_str()).map(|rec| (*rec, *row)))
            .collect();
        matched.sort_by(|a, b| a.0.dataset.cmp(&b.0.dataset));
        for (rec, row) in matched {
            let metrics = [
                ("accuracy", rec.accuracy, row.accuracy),
                ("earliness", rec.earliness, row.earliness),
                (
                    "cost",
                    cost(alpha, rec.accuracy, rec.earliness),
                    cost(alpha, row.accuracy, row.earliness),
                ),
            ];
            for (name, a, b) in metrics {
                w.write_record([rec.dataset.clone(), alpha.to_string(), name.into(), a.to_string(), b.to_string()])?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    if rows == 0 {
        log::warn!("no dataset is scored by both sides; {} holds only a header", path.display());
    }
    Ok(rows)
}
