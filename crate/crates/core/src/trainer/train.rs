use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_grad_norm, AdamHyper, AdamState};
use crate::backbones::{BackboneKind, EarlyClassifier, Forward};
use crate::dataio::LabeledSeries;
use crate::error::{Error, Result};
use crate::evalreport::{evaluate_predictions, final_accuracy};
use crate::halting::{halting_distribution, sample_stop, StopMode};
use crate::ndtensor::Tape;
use crate::objective::{halting_weighted_loss, uniform_prefix_cross_entropy, TradeOff};
use crate::scalar::Scalar;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 32;
/// Gradient-norm bound applied to the LSTM backbone.
pub const LSTM_CLIP_NORM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Accuracy-only pre-training under a uniform prefix weighting.
    Classification,
    /// End-to-end training of both heads under the halting distribution.
    Finetune,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Classification => 1,
            Phase::Finetune => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Set for [`Phase::Finetune`] only.
    pub alpha: Option<TradeOff>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Fine-tune the stopping head alone, with the backbone in inference
    /// mode.
    pub freeze_classifier: bool,
    /// Fill `wall_ms` in the log. Off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn classification(learning_rate: f64, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Classification,
            alpha: None,
            learning_rate,
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            grad_clip: None,
            freeze_classifier: false,
            record_wall_time: false,
        }
    }

    pub fn finetune(alpha: TradeOff, learning_rate: f64, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            alpha: Some(alpha),
            ..Self::classification(learning_rate, epochs, seed)
        }
    }

    /// Enables the gradient clip the backbone calls for.
    pub fn clipped_for(mut self, kind: BackboneKind) -> Self {
        self.grad_clip = match kind {
            BackboneKind::Lstm => Some(LSTM_CLIP_NORM),
            BackboneKind::Conv => None,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Argument(format!("gradient clip {c} must be positive")));
            }
        }
        match (self.phase, self.alpha) {
            (Phase::Classification, None) | (Phase::Finetune, Some(_)) => Ok(()),
            (Phase::Classification, Some(_)) => Err(Error::Argument("alpha is only used when fine-tuning".into())),
            (Phase::Finetune, None) => Err(Error::Argument("fine-tuning needs alpha".into())),
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub loss: f64,
    pub cls_loss: f64,
    pub earliness_loss: f64,
    /// Accuracy on the training batches as they were seen during the epoch.
    pub train_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    pub wall_ms: Option<u64>,
    pub learning_rate: f64,
    pub adam: AdamHyper,
}

/// Accuracy used in the log: after the full series for pre-training, at
/// the expected stopping time for fine-tuning.
fn phase_accuracy<T: Scalar>(model: &EarlyClassifier<T>, series: &[LabeledSeries<T>], cfg: &TrainConfig) -> Result<f64> {
    let refs: Vec<&LabeledSeries<T>> = series.iter().collect();
    let preds = model.predict(&refs)?;
    match cfg.alpha {
        Some(alpha) if cfg.phase == Phase::Finetune => {
            Ok(evaluate_predictions("", &preds, &refs, alpha, StopMode::Expected, 0)?.0.accuracy)
        }
        _ => Ok(final_accuracy(&preds, &refs)),
    }
}

/// Correct decisions in a training batch, scored like [`phase_accuracy`]
/// from the batch's own forward pass.
fn batch_hits<T: Scalar>(tape: &Tape<T>, fwd: &Forward, labels: &[usize], phase: Phase) -> Result<usize> {
    let probs = tape.value(fwd.probs).data();
    let delta = tape.value(fwd.delta).data();
    let c = probs.len() / delta.len();
    let mut hits = 0;
    for (s, &label) in fwd.segments.iter().zip(labels) {
        let t = match phase {
            Phase::Classification => s.len - 1,
            Phase::Finetune => {
                let trace = halting_distribution(&delta[s.range()])?;
                sample_stop(&trace, StopMode::Expected, &mut ChaCha8Rng::seed_from_u64(0))
            }
        };
        let row = &probs[(s.start + t) * c..(s.start + t + 1) * c];
        let best = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        hits += usize::from(best == label);
    }
    Ok(hits)
}

fn check_data<T: Scalar>(model: &EarlyClassifier<T>, series: &[LabeledSeries<T>], what: &str) -> Result<()> {
    let c = model.num_classes();
    let d = model.config().backbone.input_dim();
    for (i, s) in series.iter().enumerate() {
        if s.label >= c {
            return Err(Error::Argument(format!("{what} series {i} has class {} of {c}", s.label)));
        }
        if s.dim() != d {
            return Err(Error::dim("train", &[s.dim()], &[d]));
        }
    }
    Ok(())
}

fn run<T: Scalar>(
    model: &mut EarlyClassifier<T>,
    train: &[LabeledSeries<T>],
    val: Option<&[LabeledSeries<T>]>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    check_data(model, train, "training")?;
    if let Some(v) = val {
        check_data(model, v, "validation")?;
    }
    let (sw, sb) = model.stop_head();
    let trainable: Vec<bool> = (0..model.params().len())
        .map(|i| {
            let stop = i == sw || i == sb;
            match cfg.phase {
                Phase::Classification => !stop,
                Phase::Finetune => stop || !cfg.freeze_classifier,
            }
        })
        .collect();
    let backbone_training = !cfg.freeze_classifier;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut cls_sum, mut earl_sum) = (0.0, 0.0, 0.0);
        let mut hits = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSeries<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let p = model.params().bind_masked(&mut tape, &trainable);
            let fwd = model.forward_batch(&mut tape, &p, &batch, backbone_training, &mut rng)?;
            let loss = match cfg.alpha {
                Some(alpha) if cfg.phase == Phase::Finetune => {
                    let halt = tape.halting(fwd.delta, &fwd.segments)?;
                    halting_weighted_loss(&mut tape, fwd.probs, halt, &labels, &fwd.segments, alpha)?
                }
                _ => uniform_prefix_cross_entropy(&mut tape, fwd.logits, &labels, &fwd.segments)?,
            };
            hits += batch_hits(&tape, &fwd, &labels, cfg.phase)?;
            let value = tape.value(loss.total).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            tape.backward(loss.total)?;
            let mut grads: Vec<Option<Vec<T>>> = model
                .params()
                .iter()
                .enumerate()
                .map(|(i, param)| {
                    trainable[i].then(|| match tape.grad(p.id(i)) {
                        Some(g) => g.data().to_vec(),
                        None => vec![T::zero(); param.value.len()],
                    })
                })
                .collect();
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(model.params_mut(), &grads, &mut adam, cfg.learning_rate)?;
            let w = batch.len() as f64;
            loss_sum += value * w;
            cls_sum += loss.cls * w;
            earl_sum += loss.earliness * w;
        }
        let n = train.len() as f64;
        let train_acc = hits as f64 / n;
        let val_acc = val.map(|v| phase_accuracy(model, v, cfg)).transpose()?;
        let record = EpochRecord {
            epoch,
            phase: cfg.phase.number(),
            loss: loss_sum / n,
            cls_loss: cls_sum / n,
            earliness_loss: earl_sum / n,
            train_acc,
            val_acc,
            wall_ms: cfg.record_wall_time.then(|| clock.elapsed().as_millis() as u64),
            learning_rate: cfg.learning_rate,
            adam: adam.hyper,
        };
        log::info!(
            "epoch {epoch} phase {} loss {:.5} train_acc {:.4}",
            record.phase,
            record.loss,
            record.train_acc
        );
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

/// Pre-trains backbone and classification head on the uniform-prefix
/// cross-entropy. The stopping head is not updated.
pub fn train_phase1<T: Scalar>(
    model: &mut EarlyClassifier<T>,
    train: &[LabeledSeries<T>],
    val: Option<&[LabeledSeries<T>]>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if cfg.phase != Phase::Classification {
        return Err(Error::Argument("phase-1 training needs a classification config".into()));
    }
    run(model, train, val, cfg, on_epoch)
}

/// Resets the stopping head with [`EarlyClassifier::init_late`], then
/// trains on the halting-weighted loss.
pub fn train_phase2<T: Scalar>(
    model: &mut EarlyClassifier<T>,
    train: &[LabeledSeries<T>],
    val: Option<&[LabeledSeries<T>]>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if cfg.phase != Phase::Finetune {
        return Err(Error::Argument("phase-2 training needs a finetune config".into()));
    }
    model.init_late();
    run(model, train, val, cfg, on_epoch)
}

/// One JSON object per line.
pub fn write_log<W: std::io::Write>(records: &[EpochRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}
