//! Checkpoint files: the line `EHALT1`, then one JSON document holding the
//! model configuration, every parameter array by name, batch-norm running
//! statistics and run metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{EarlyClassifier, ModelConfig};
use super::params::{NamedArray, ParamStore};
use crate::error::{Error, Result};
use crate::ndtensor::BatchNormState;
use crate::scalar::Scalar;

pub const MAGIC: &str = "EHALT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// How the stored parameters came about.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub z_normalize: bool,
    /// Training phases applied so far, in order.
    #[serde(default)]
    pub phases: Vec<u8>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub scalar: String,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    pub batch_norm: Option<BatchNormStats>,
    pub meta: RunMeta,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &EarlyClassifier<T>, meta: RunMeta) -> Self {
        Checkpoint {
            scalar: T::NAME.to_string(),
            config: *model.config(),
            params: model.params().to_named(),
            batch_norm: model.batch_norm_state().map(|bn| BatchNormStats {
                running_mean: bn.running_mean.iter().map(|v| v.as_f64()).collect(),
                running_var: bn.running_var.iter().map(|v| v.as_f64()).collect(),
            }),
            meta,
        }
    }

    /// Rebuilds the model; array names and shapes must match the layout the
    /// stored configuration produces.
    pub fn to_model<T: Scalar>(&self) -> Result<EarlyClassifier<T>> {
        let fresh: EarlyClassifier<T> = EarlyClassifier::new(self.config)?;
        let mut params: ParamStore<T> = fresh.params().clone();
        params.load_named(&self.params)?;
        let bn = match (fresh.batch_norm_state(), &self.batch_norm) {
            (Some(template), Some(stats)) => {
                if stats.running_mean.len() != template.running_mean.len()
                    || stats.running_var.len() != template.running_var.len()
                {
                    return Err(Error::Checkpoint("batch-norm statistics have the wrong width".into()));
                }
                let mut bn = BatchNormState::new(template.running_mean.len());
                bn.running_mean = stats.running_mean.iter().map(|&v| T::lit(v)).collect();
                bn.running_var = stats.running_var.iter().map(|&v| T::lit(v)).collect();
                Some(bn)
            }
            (None, None) => None,
            _ => return Err(Error::Checkpoint("batch-norm statistics do not match the backbone".into())),
        };
        EarlyClassifier::from_parts(self.config, params, bn)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        serde_json::to_writer(&mut out, self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(MAGIC.as_bytes())
            .and_then(|rest| rest.strip_prefix(b"\n"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {MAGIC} header")))?;
        Ok(serde_json::from_slice(body)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
