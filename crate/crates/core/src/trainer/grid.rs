use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{train_phase1, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_LEARNING_RATE};
use crate::backbones::{BackboneConfig, ConvShapeletConfig, EarlyClassifier, LstmConfig, ModelConfig};
use crate::dataio::{stratified_kfold, LabeledSeries};
use crate::error::{Error, Result};
use crate::evalreport::final_accuracy;
use crate::scalar::Scalar;

/// A backbone configuration with its learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub backbone: BackboneConfig,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvAxes {
    pub num_blocks: Vec<usize>,
    pub kernels_per_block: Vec<usize>,
    pub width_step: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: Vec<f64>,
}

fn default_dropout() -> Vec<f64> {
    vec![0.5]
}

fn default_rates() -> Vec<f64> {
    vec![DEFAULT_LEARNING_RATE]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmAxes {
    pub num_layers: Vec<usize>,
    pub hidden_dim: Vec<usize>,
}

/// Grid file contents: Cartesian axes per backbone and/or explicit points.
/// Expansion order is conv axes (outermost first), then LSTM axes, then
/// explicit points, each crossed with the learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub conv: Option<ConvAxes>,
    #[serde(default)]
    pub lstm: Option<LstmAxes>,
    #[serde(default = "default_rates")]
    pub learning_rate: Vec<f64>,
    #[serde(default)]
    pub points: Vec<GridPoint>,
}

impl GridSpec {
    /// Full-scale grid: conv and LSTM axes crossed with learning rates 0.1 and 0.01.
    pub fn reference() -> Self {
        GridSpec {
            conv: Some(ConvAxes {
                num_blocks: vec![4, 6, 8],
                kernels_per_block: vec![50, 75, 100],
                width_step: vec![30, 50, 70],
                dropout_rate: default_dropout(),
            }),
            lstm: Some(LstmAxes {
                num_layers: vec![2, 3, 4, 5, 6],
                hidden_dim: vec![64, 128, 256, 512],
            }),
            learning_rate: vec![0.1, 0.01],
            points: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn expand(&self, input_dim: usize) -> Result<Vec<GridPoint>> {
        let mut backbones = Vec::new();
        if let Some(c) = &self.conv {
            for &num_blocks in &c.num_blocks {
                for &kernels_per_block in &c.kernels_per_block {
                    for &width_step in &c.width_step {
                        for &dropout_rate in &c.dropout_rate {
                            backbones.push(BackboneConfig::Conv(ConvShapeletConfig {
                                num_blocks,
                                kernels_per_block,
                                width_step,
                                input_dim,
                                dropout_rate,
                            }));
                        }
                    }
                }
            }
        }
        if let Some(l) = &self.lstm {
            for &num_layers in &l.num_layers {
                for &hidden_dim in &l.hidden_dim {
                    backbones.push(BackboneConfig::Lstm(LstmConfig {
                        num_layers,
                        hidden_dim,
                        input_dim,
                    }));
                }
            }
        }
        let mut out = Vec::new();
        for b in backbones {
            for &lr in &self.learning_rate {
                out.push(GridPoint {
                    backbone: b,
                    learning_rate: lr,
                });
            }
        }
        for p in &self.points {
            let mut p = *p;
            p.backbone.set_input_dim(input_dim);
            out.push(p);
        }
        if out.is_empty() {
            return Err(Error::Argument("grid has no points".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl CvSettings {
    pub fn new(folds: usize, epochs: usize, seed: u64) -> Self {
        CvSettings {
            folds,
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub index: usize,
    pub point: GridPoint,
    pub num_parameters: usize,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best: usize,
    pub best_config: ModelConfig,
    pub best_learning_rate: f64,
    pub settings: CvSettings,
    pub rows: Vec<CvRow>,
}

/// Trains every grid point on every stratified fold (pre-training only) and
/// selects the best mean hold-out accuracy; ties go to fewer parameters,
/// then to the earlier grid point. Grid points and folds are trained in
/// parallel; the result does not depend on scheduling.
pub fn grid_search_cv<T: Scalar>(
    train: &[LabeledSeries<T>],
    num_classes: usize,
    grid: &[GridPoint],
    settings: &CvSettings,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::Argument("grid has no points".into()));
    }
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let folds = stratified_kfold(&labels, settings.folds, settings.seed)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..folds.len()).map(move |f| (g, f)))
        .collect();
    let scores: Vec<(usize, f64)> = jobs
        .par_iter()
        .map(|&(g, f)| -> Result<(usize, f64)> {
            let point = grid[g];
            let mut model = EarlyClassifier::<T>::new(ModelConfig {
                backbone: point.backbone,
                num_classes,
                init_seed: settings.seed,
            })?;
            let fit: Vec<LabeledSeries<T>> = folds[f].fit.iter().map(|&i| train[i].clone()).collect();
            let mut cfg = TrainConfig::classification(point.learning_rate, settings.epochs, settings.seed.wrapping_add(f as u64))
                .clipped_for(point.backbone.kind());
            cfg.batch_size = settings.batch_size;
            train_phase1(&mut model, &fit, None, &cfg, &mut |_| {})?;
            let holdout: Vec<&LabeledSeries<T>> = folds[f].holdout.iter().map(|&i| &train[i]).collect();
            let preds = model.predict(&holdout)?;
            Ok((model.num_parameters(), final_accuracy(&preds, &holdout)))
        })
        .collect::<Result<_>>()?;
    let k = folds.len();
    let rows: Vec<CvRow> = grid
        .iter()
        .enumerate()
        .map(|(g, point)| {
            let fold_accuracy: Vec<f64> = scores[g * k..(g + 1) * k].iter().map(|s| s.1).collect();
            CvRow {
                index: g,
                point: *point,
                num_parameters: scores[g * k].0,
                mean_accuracy: fold_accuracy.iter().sum::<f64>() / k as f64,
                fold_accuracy,
            }
        })
        .collect();
    let best = rows
        .iter()
        .min_by(|a, b| {
            b.mean_accuracy
                .total_cmp(&a.mean_accuracy)
                .then(a.num_parameters.cmp(&b.num_parameters))
                .then(a.index.cmp(&b.index))
        })
        .map(|r| r.index)
        .expect("non-empty grid");
    Ok(CvReport {
        best,
        best_config: ModelConfig {
            backbone: grid[best].backbone,
            num_classes,
            init_seed: settings.seed,
        },
        best_learning_rate: grid[best].learning_rate,
        settings: settings.clone(),
        rows,
    })
}
