use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One observed sequence `x_0..x_T` of `dim`-channel frames plus its class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries<T> {
    /// Row-major `[N×dim]` frames.
    values: Vec<T>,
    dim: usize,
    pub label: usize,
    pub original_label: String,
}

impl<T: Scalar> LabeledSeries<T> {
    pub fn new(values: Vec<T>, dim: usize, label: usize, original_label: impl Into<String>) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::Argument(format!(
                "series needs a positive number of {dim}-channel frames, got {} values",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("series value {bad}")));
        }
        Ok(LabeledSeries {
            values,
            dim,
            label,
            original_label: original_label.into(),
        })
    }

    /// Univariate convenience constructor.
    pub fn univariate(values: Vec<T>, label: usize) -> Result<Self> {
        let raw = label.to_string();
        Self::new(values, 1, label, raw)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Final index `T = N − 1`.
    pub fn last_index(&self) -> usize {
        self.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

/// Per-series, per-channel standardization. Channels with standard
/// deviation below `1e-12` are only centered.
pub fn z_normalize<T: Scalar>(series: &LabeledSeries<T>) -> LabeledSeries<T> {
    let n = series.len();
    let d = series.dim;
    let mut out = series.clone();
    let nt = T::lit(n as f64);
    for c in 0..d {
        let mean = (0..n).map(|t| series.values[t * d + c]).sum::<T>() / nt;
        let var = (0..n)
            .map(|t| {
                let z = series.values[t * d + c] - mean;
                z * z
            })
            .sum::<T>()
            / nt;
        let std = var.sqrt();
        let scale = if std < T::lit(1e-12) { T::one() } else { T::one() / std };
        for t in 0..n {
            out.values[t * d + c] = (series.values[t * d + c] - mean) * scale;
        }
    }
    out
}

/// Train/test split sharing one label mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub name: String,
    pub train: Vec<LabeledSeries<T>>,
    pub test: Vec<LabeledSeries<T>>,
    pub num_classes: usize,
    /// Raw label token for each class index.
    pub label_map: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn class_of(&self, raw: &str) -> Option<usize> {
        self.label_map.iter().position(|l| l == raw)
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(1, |s| s.dim())
    }

    pub fn z_normalized(&self) -> Self {
        Dataset {
            name: self.name.clone(),
            train: self.train.iter().map(z_normalize).collect(),
            test: self.test.iter().map(z_normalize).collect(),
            num_classes: self.num_classes,
            label_map: self.label_map.clone(),
        }
    }
}
