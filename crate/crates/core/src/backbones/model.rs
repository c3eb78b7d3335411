use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::{ConvBackbone, ConvShapeletConfig};
use super::lstm::{LstmBackbone, LstmConfig, LstmState};
use super::params::{Bound, ParamStore};
use crate::dataio::LabeledSeries;
use crate::error::{Error, Result};
use crate::halting::{init_late, stop_probability};
use crate::ndtensor::{segments_from_lengths, BatchNormState, NodeId, Segment, Tape, Tensor};
use crate::scalar::Scalar;

/// Series per tape when predicting.
const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Conv,
    Lstm,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Conv => "conv",
            BackboneKind::Lstm => "lstm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    Conv(ConvShapeletConfig),
    Lstm(LstmConfig),
}

impl BackboneConfig {
    /// Desk-scale defaults for the given input width.
    pub fn default_for(kind: BackboneKind, input_dim: usize) -> Self {
        match kind {
            BackboneKind::Conv => BackboneConfig::Conv(ConvShapeletConfig {
                input_dim,
                ..ConvShapeletConfig::default()
            }),
            BackboneKind::Lstm => BackboneConfig::Lstm(LstmConfig {
                input_dim,
                ..LstmConfig::default()
            }),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            BackboneConfig::Conv(_) => BackboneKind::Conv,
            BackboneConfig::Lstm(_) => BackboneKind::Lstm,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            BackboneConfig::Conv(c) => c.hidden_dim(),
            BackboneConfig::Lstm(c) => c.hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BackboneConfig::Conv(c) => c.input_dim,
            BackboneConfig::Lstm(c) => c.input_dim,
        }
    }

    pub fn set_input_dim(&mut self, dim: usize) {
        match self {
            BackboneConfig::Conv(c) => c.input_dim = dim,
            BackboneConfig::Lstm(c) => c.input_dim = dim,
        }
    }
}

/// Backbone plus the sizes of the two heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

#[derive(Clone, Debug)]
enum Backbone {
    Conv(ConvBackbone),
    Lstm(LstmBackbone),
}

/// Outputs of a batched forward pass, one row per (series, prefix) pair in
/// series-major order.
#[derive(Clone, Debug)]
pub struct Forward {
    pub hidden: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub delta: NodeId,
    pub segments: Vec<Segment>,
}

/// Per-prefix class probabilities and stop probabilities of one series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPrediction<T> {
    /// `N×C`, row-major.
    pub probs: Vec<T>,
    pub delta: Vec<T>,
    pub num_classes: usize,
}

impl<T: Scalar> SeriesPrediction<T> {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn probs_at(&self, t: usize) -> &[T] {
        &self.probs[t * self.num_classes..(t + 1) * self.num_classes]
    }

    /// Most probable class at `t`; lowest index on ties.
    pub fn predicted_at(&self, t: usize) -> usize {
        let row = self.probs_at(t);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        best
    }
}

/// Sequence backbone with a softmax classification head and a sigmoid
/// stopping head on the same hidden state.
#[derive(Clone, Debug)]
pub struct EarlyClassifier<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    cls: (usize, usize),
    stop: (usize, usize),
    bn: Option<BatchNormState<T>>,
}

impl<T: Scalar> EarlyClassifier<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {}", config.num_classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let (backbone, bn) = match config.backbone {
            BackboneConfig::Conv(c) => {
                let b = ConvBackbone::register(c, &mut params, &mut rng)?;
                (Backbone::Conv(b), Some(BatchNormState::new(c.hidden_dim())))
            }
            BackboneConfig::Lstm(c) => (Backbone::Lstm(LstmBackbone::register(c, &mut params, &mut rng)?), None),
        };
        let h = config.backbone.hidden_dim();
        let bound = 1.0 / (h as f64).sqrt();
        let cw = params.push_uniform("cls.weight", &[h, config.num_classes], bound, &mut rng)?;
        let cb = params.push("cls.bias", Tensor::zeros(&[config.num_classes])?);
        let sw = params.push_uniform("stop.weight", &[h, 1], bound, &mut rng)?;
        let sb = params.push("stop.bias", Tensor::zeros(&[1])?);
        Ok(EarlyClassifier {
            config,
            params,
            backbone,
            cls: (cw, cb),
            stop: (sw, sb),
            bn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn batch_norm_state(&self) -> Option<&BatchNormState<T>> {
        self.bn.as_ref()
    }

    /// Indices of the stopping head's weight and bias in the parameter store.
    pub fn stop_head(&self) -> (usize, usize) {
        self.stop
    }

    /// Indices of the classification head's weight and bias.
    pub fn class_head(&self) -> (usize, usize) {
        self.cls
    }

    /// Resets the stopping head so the initial halting mass sits late.
    pub fn init_late(&mut self) {
        let (w, b) = self.stop;
        let mut weight = self.params.at(w).value.data().to_vec();
        let mut bias = self.params.at(b).value.data().to_vec();
        init_late(&mut weight, &mut bias);
        self.params.at_mut(w).value.data_mut().copy_from_slice(&weight);
        self.params.at_mut(b).value.data_mut().copy_from_slice(&bias);
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub(super) fn conv(&self) -> Result<&ConvBackbone> {
        match &self.backbone {
            Backbone::Conv(c) => Ok(c),
            Backbone::Lstm(_) => Err(Error::Argument("operation needs the conv backbone".into())),
        }
    }

    fn lstm(&self) -> Result<&LstmBackbone> {
        match &self.backbone {
            Backbone::Lstm(l) => Ok(l),
            Backbone::Conv(_) => Err(Error::Argument("operation needs the LSTM backbone".into())),
        }
    }

    /// Conv hidden state of prefix `0..=t` of `x` (`[N×D]`), `[L·d]`.
    pub fn conv_hidden<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: NodeId,
        t: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let conv = self.conv()?.clone();
        let pooled = conv.pooled_at(tape, p, x, t)?;
        let bn = self.bn.as_mut().expect("conv backbone carries batch-norm state");
        conv.normalize(tape, p, pooled, bn, training, rng)
    }

    /// Hidden states of every prefix of `x` (`[N×D]`) in one pass, `[N×H]`.
    pub fn all_prefix_hidden<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: NodeId,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let xd = tape.dims(x).to_vec();
        if xd.len() != 2 {
            return Err(Error::dim("all_prefix_hidden", &xd, &[0, self.config.backbone.input_dim()]));
        }
        match &self.backbone {
            Backbone::Conv(conv) => {
                let pooled = conv.pooled_all(tape, p, x)?;
                let bn = self.bn.as_mut().expect("conv backbone carries batch-norm state");
                conv.normalize(tape, p, pooled, bn, training, rng)
            }
            Backbone::Lstm(lstm) => {
                let inputs = (0..xd[0])
                    .map(|t| tape.gather_rows(x, &[t]))
                    .collect::<Result<Vec<_>>>()?;
                let tops = lstm.unroll(tape, p, &inputs)?;
                tape.concat_rows(&tops)
            }
        }
    }

    /// One LSTM step for a batch `x_t` of `[B×D]` frames.
    pub fn lstm_step(&self, tape: &mut Tape<T>, p: &Bound, x_t: NodeId, state: &LstmState) -> Result<LstmState> {
        self.lstm()?.step(tape, p, x_t, state)
    }

    pub fn initial_lstm_state(&self, tape: &mut Tape<T>, batch: usize) -> Result<LstmState> {
        LstmState::zeros(tape, &self.lstm()?.cfg, batch)
    }

    pub fn class_logits(&self, tape: &mut Tape<T>, p: &Bound, h: NodeId) -> Result<NodeId> {
        tape.linear(h, p.id(self.cls.0), p.id(self.cls.1))
    }

    /// Class probabilities for a hidden vector or a stack of them.
    pub fn classify(&self, tape: &mut Tape<T>, p: &Bound, h: NodeId) -> Result<NodeId> {
        let z = self.class_logits(tape, p, h)?;
        tape.softmax_rows(z)
    }

    pub fn stop_probability(&self, tape: &mut Tape<T>, p: &Bound, h: NodeId) -> Result<NodeId> {
        stop_probability(tape, h, p.id(self.stop.0), p.id(self.stop.1))
    }

    /// Hidden states of every prefix of every series, stacked series-major.
    pub fn hidden_batch<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        p: &Bound,
        series: &[&LabeledSeries<T>],
        training: bool,
        rng: &mut R,
    ) -> Result<(NodeId, Vec<Segment>)> {
        if series.is_empty() {
            return Err(Error::Argument("forward pass over an empty batch".into()));
        }
        let dim = self.config.backbone.input_dim();
        if let Some(s) = series.iter().find(|s| s.dim() != dim) {
            return Err(Error::dim("forward", &[s.len(), s.dim()], &[s.len(), dim]));
        }
        let lengths: Vec<usize> = series.iter().map(|s| s.len()).collect();
        let segments = segments_from_lengths(&lengths);
        let hidden = match &self.backbone {
            Backbone::Conv(conv) => {
                let mut pooled = Vec::with_capacity(series.len());
                for s in series {
                    let x = tape.constant(Tensor::from_vec(&[s.len(), dim], s.values().to_vec())?);
                    pooled.push(conv.pooled_all(tape, p, x)?);
                }
                let stacked = if pooled.len() == 1 { pooled[0] } else { tape.concat_rows(&pooled)? };
                let bn = self.bn.as_mut().expect("conv backbone carries batch-norm state");
                conv.normalize(tape, p, stacked, bn, training, rng)?
            }
            Backbone::Lstm(lstm) => {
                let b = series.len();
                let steps = lengths.iter().copied().max().unwrap_or(0);
                let mut inputs = Vec::with_capacity(steps);
                for t in 0..steps {
                    let mut frame = vec![T::zero(); b * dim];
                    for (i, s) in series.iter().enumerate() {
                        if t < s.len() {
                            frame[i * dim..(i + 1) * dim].copy_from_slice(s.frame(t));
                        }
                    }
                    inputs.push(tape.constant(Tensor::from_vec(&[b, dim], frame)?));
                }
                let tops = lstm.unroll(tape, p, &inputs)?;
                let stacked = tape.concat_rows(&tops)?;
                if b == 1 {
                    stacked
                } else {
                    let rows: Vec<usize> = lengths
                        .iter()
                        .enumerate()
                        .flat_map(|(i, &n)| (0..n).map(move |t| t * b + i))
                        .collect();
                    tape.gather_rows(stacked, &rows)?
                }
            }
        };
        Ok((hidden, segments))
    }

    /// Hidden states, class logits/probabilities and stop probabilities of
    /// every prefix in the batch.
    pub fn forward_batch<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        p: &Bound,
        series: &[&LabeledSeries<T>],
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let (hidden, segments) = self.hidden_batch(tape, p, series, training, rng)?;
        let logits = self.class_logits(tape, p, hidden)?;
        let probs = tape.softmax_rows(logits)?;
        let delta = self.stop_probability(tape, p, hidden)?;
        Ok(Forward {
            hidden,
            logits,
            probs,
            delta,
            segments,
        })
    }

    /// Inference-mode outputs for every prefix of every series, in input
    /// order. Chunks are evaluated in parallel.
    pub fn predict(&self, series: &[&LabeledSeries<T>]) -> Result<Vec<SeriesPrediction<T>>> {
        let chunks: Vec<Vec<SeriesPrediction<T>>> = series
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| self.predict_chunk(chunk))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn predict_one(&self, series: &LabeledSeries<T>) -> Result<SeriesPrediction<T>> {
        Ok(self.predict_chunk(&[series])?.remove(0))
    }

    fn predict_chunk(&self, chunk: &[&LabeledSeries<T>]) -> Result<Vec<SeriesPrediction<T>>> {
        // Inference mode never touches the running statistics or the rng.
        let mut scratch = EarlyClassifier {
            config: self.config,
            params: ParamStore::new(),
            backbone: self.backbone.clone(),
            cls: self.cls,
            stop: self.stop,
            bn: self.bn.clone(),
        };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = scratch.forward_batch(&mut tape, &p, chunk, false, &mut rng)?;
        let c = self.config.num_classes;
        let probs = tape.value(fwd.probs).data();
        let delta = tape.value(fwd.delta).data();
        Ok(fwd
            .segments
            .iter()
            .map(|s| SeriesPrediction {
                probs: probs[s.start * c..s.end() * c].to_vec(),
                delta: delta[s.range()].to_vec(),
                num_classes: c,
            })
            .collect())
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore<T>, bn: Option<BatchNormState<T>>) -> Result<Self> {
        let mut model = EarlyClassifier::new(config)?;
        model.params = params;
        if let (Some(dst), Some(src)) = (model.bn.as_mut(), bn) {
            *dst = src;
        }
        Ok(model)
    }
}
