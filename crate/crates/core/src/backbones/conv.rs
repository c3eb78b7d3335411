use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::ndtensor::{BatchNormState, NodeId, Tape, Tensor};
use crate::scalar::Scalar;

/// Stack of causal convolution blocks whose outputs are max-pooled over the
/// observed prefix. Block `l` (1-based) uses kernels of width `l·width_step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvShapeletConfig {
    pub num_blocks: usize,
    pub kernels_per_block: usize,
    pub width_step: usize,
    pub input_dim: usize,
    pub dropout_rate: f64,
}

impl Default for ConvShapeletConfig {
    fn default() -> Self {
        ConvShapeletConfig {
            num_blocks: 4,
            kernels_per_block: 8,
            width_step: 3,
            input_dim: 1,
            dropout_rate: 0.5,
        }
    }
}

impl ConvShapeletConfig {
    pub fn hidden_dim(&self) -> usize {
        self.num_blocks * self.kernels_per_block
    }

    /// Kernel width of 1-based block `l`.
    pub fn kernel_width(&self, l: usize) -> usize {
        l * self.width_step
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.kernels_per_block == 0 || self.width_step == 0 || self.input_dim == 0 {
            return Err(Error::Argument(format!("conv backbone counts must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Argument(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBackbone {
    pub cfg: ConvShapeletConfig,
    kernels: Vec<(usize, usize)>,
    gamma: usize,
    beta: usize,
}

impl ConvBackbone {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        cfg: ConvShapeletConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (din, d) = (cfg.input_dim, cfg.kernels_per_block);
        let mut kernels = Vec::with_capacity(cfg.num_blocks);
        for l in 1..=cfg.num_blocks {
            let w = cfg.kernel_width(l);
            let bound = 1.0 / ((w * din) as f64).sqrt();
            let k = store.push_uniform(format!("conv{l}.kernel"), &[w, din, d], bound, rng)?;
            let b = store.push(format!("conv{l}.bias"), Tensor::zeros(&[d])?);
            kernels.push((k, b));
        }
        let h = cfg.hidden_dim();
        let gamma = store.push("bn.gamma", Tensor::filled(&[h], T::one())?);
        let beta = store.push("bn.beta", Tensor::zeros(&[h])?);
        Ok(ConvBackbone { cfg, kernels, gamma, beta })
    }

    fn feature_maps<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> Result<Vec<NodeId>> {
        let xd = tape.dims(x).to_vec();
        if xd.len() != 2 || xd[1] != self.cfg.input_dim {
            return Err(Error::dim("conv backbone", &xd, &[0, self.cfg.input_dim]));
        }
        self.kernels
            .iter()
            .map(|&(k, b)| tape.conv1d_causal(x, p.id(k), p.id(b)))
            .collect()
    }

    /// Pooled features of every prefix before normalization, `[N×H]`.
    pub fn pooled_all<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let maps = self.feature_maps(tape, p, x)?;
        let pooled = maps
            .into_iter()
            .map(|f| tape.running_max(f))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&pooled)
    }

    /// Pooled features of prefix `0..=t` before normalization, `[H]`.
    pub fn pooled_at<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId, t: usize) -> Result<NodeId> {
        let maps = self.feature_maps(tape, p, x)?;
        let pooled = maps
            .into_iter()
            .map(|f| tape.prefix_max_pool(f, t))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_features(&pooled)
    }

    pub fn normalize<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pooled: NodeId,
        bn: &mut BatchNormState<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let h = tape.batch_norm(pooled, p.id(self.gamma), p.id(self.beta), bn, training)?;
        tape.dropout(h, self.cfg.dropout_rate, training, rng)
    }
}
