use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::series::Dataset;
use super::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Optional descriptor stored next to a dataset's split files.
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    /// Whether training should standardize each series.
    #[serde(default)]
    pub z_normalize: Option<bool>,
    #[serde(default)]
    pub generator: Option<SynthConfig>,
}

pub fn read_metadata(dir: &Path) -> Result<Option<DatasetMeta>> {
    let path = dir.join(METADATA_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn write_metadata(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    let path = dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(meta)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    /// Metadata decides; without it, series that are not already
    /// standardized get normalized.
    Auto,
    On,
    Off,
}

/// True when every series has mean within `tol` of 0 and standard
/// deviation within `tol` of 1 on every channel.
pub fn looks_normalized<T: Scalar>(dataset: &Dataset<T>, tol: f64) -> bool {
    dataset.train.iter().chain(&dataset.test).all(|s| {
        let (n, d) = (s.len(), s.dim());
        (0..d).all(|c| {
            let xs: Vec<f64> = (0..n).map(|t| s.frame(t)[c].as_f64()).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            mean.abs() <= tol && (n == 1 || (sd - 1.0).abs() <= tol)
        })
    })
}

pub fn resolve_normalization<T: Scalar>(policy: Normalize, dir: &Path, dataset: &Dataset<T>) -> Result<bool> {
    Ok(match policy {
        Normalize::On => true,
        Normalize::Off => false,
        Normalize::Auto => match read_metadata(dir)?.and_then(|m| m.z_normalize) {
            Some(flag) => flag,
            None => !looks_normalized(dataset, 1e-2),
        },
    })
}
