use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::series::{Dataset, LabeledSeries};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameters of the two-class pattern dataset. Serialized verbatim into
/// the metadata written next to generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub length: usize,
    /// Pattern onset as a fraction of the length, in `(0, 1)`.
    pub signal_pos: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn pattern_len(&self) -> usize {
        (self.length / 10).max(1)
    }

    pub fn onset(&self) -> usize {
        (self.signal_pos * self.length as f64).floor() as usize
    }
}

/// Gaussian noise of standard deviation `sigma` with a class-specific box
/// pattern (`+1` for class 0, `−1` for class 1) of length `N/10` starting at
/// `⌊p·N⌋`. Both classes share the noise law before the onset, so no rule
/// can beat chance before it.
pub fn synth_pattern_dataset<T: Scalar>(cfg: &SynthConfig) -> Result<Dataset<T>> {
    if !(cfg.signal_pos > 0.0 && cfg.signal_pos < 1.0) {
        return Err(Error::Argument(format!("signal position {} outside (0, 1)", cfg.signal_pos)));
    }
    if cfg.sigma < 0.0 || !cfg.sigma.is_finite() {
        return Err(Error::Argument(format!("noise level {} must be finite and >= 0", cfg.sigma)));
    }
    if cfg.length < 2 || cfg.n_train_per_class == 0 {
        return Err(Error::Argument("need length >= 2 and at least one series per class".into()));
    }
    let (onset, plen) = (cfg.onset(), cfg.pattern_len());
    if onset + plen > cfg.length {
        return Err(Error::Argument(format!(
            "pattern [{onset}, {}) overruns series of length {}",
            onset + plen,
            cfg.length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |class: usize| -> Result<LabeledSeries<T>> {
        let sign = if class == 0 { 1.0 } else { -1.0 };
        let values = (0..cfg.length)
            .map(|t| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let signal = if (onset..onset + plen).contains(&t) { sign } else { 0.0 };
                T::lit(cfg.sigma * noise + signal)
            })
            .collect();
        LabeledSeries::new(values, 1, class, (class + 1).to_string())
    };
    let mut train = Vec::with_capacity(2 * cfg.n_train_per_class);
    for _ in 0..cfg.n_train_per_class {
        train.push(draw(0)?);
        train.push(draw(1)?);
    }
    let mut test = Vec::with_capacity(2 * cfg.n_test_per_class);
    for _ in 0..cfg.n_test_per_class {
        test.push(draw(0)?);
        test.push(draw(1)?);
    }
    Ok(Dataset {
        name: "SynthPattern".to_string(),
        train,
        test,
        num_classes: 2,
        label_map: vec!["1".to_string(), "2".to_string()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sigma: f64, n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_train_per_class: n,
            n_test_per_class: 2,
            length: 100,
            signal_pos: 0.3,
            sigma,
            seed,
        }
    }

    #[test]
    fn noiseless_classes_separate_on_the_pattern() {
        let ds: Dataset<f64> = synth_pattern_dataset(&cfg(0.0, 5, 1)).unwrap();
        for s in &ds.train {
            let window: f64 = s.values()[30..40].iter().sum();
            assert_eq!(window, if s.label == 0 { 10.0 } else { -10.0 });
            assert!(s.values()[..30].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn seed_fixes_dataset() {
        let a: Dataset<f64> = synth_pattern_dataset(&cfg(0.5, 3, 9)).unwrap();
        let b: Dataset<f64> = synth_pattern_dataset(&cfg(0.5, 3, 9)).unwrap();
        let c: Dataset<f64> = synth_pattern_dataset(&cfg(0.5, 3, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_before_onset_is_class_independent() {
        // Welch two-sample statistic on prefix means, 10^4 series per class
        let ds: Dataset<f64> = synth_pattern_dataset(&cfg(0.5, 10_000, 3)).unwrap();
        let stats = |class: usize| {
            let means: Vec<f64> = ds
                .train
                .iter()
                .filter(|s| s.label == class)
                .map(|s| s.values()[..30].iter().sum::<f64>() / 30.0)
                .collect();
            let n = means.len() as f64;
            let m = means.iter().sum::<f64>() / n;
            let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, v, n)
        };
        let (m0, v0, n0) = stats(0);
        let (m1, v1, n1) = stats(1);
        let z = (m0 - m1) / (v0 / n0 + v1 / n1).sqrt();
        assert!(z.abs() < 2.576, "z = {z}");
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(0.5, 1, 0);
        c.signal_pos = 0.95;
        assert!(synth_pattern_dataset::<f64>(&c).is_err());
        c.signal_pos = 0.0;
        assert!(synth_pattern_dataset::<f64>(&c).is_err());
    }
}
