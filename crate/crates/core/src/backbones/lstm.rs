use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::ndtensor::{NodeId, Tape, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            num_layers: 2,
            hidden_dim: 32,
            input_dim: 1,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::Argument(format!("LSTM counts must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Per-layer hidden and cell states of a batch, each `[B×r]`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Vec<NodeId>,
    pub c: Vec<NodeId>,
}

impl LstmState {
    pub fn zeros<T: Scalar>(tape: &mut Tape<T>, cfg: &LstmConfig, batch: usize) -> Result<Self> {
        let mut h = Vec::with_capacity(cfg.num_layers);
        let mut c = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            h.push(tape.constant(Tensor::zeros(&[batch, cfg.hidden_dim])?));
            c.push(tape.constant(Tensor::zeros(&[batch, cfg.hidden_dim])?));
        }
        Ok(LstmState { h, c })
    }

    /// Hidden state of the top layer.
    pub fn top(&self) -> NodeId {
        *self.h.last().expect("LSTM state has at least one layer")
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LstmBackbone {
    pub cfg: LstmConfig,
    layers: Vec<(usize, usize)>,
}

impl LstmBackbone {
    /// Gate layout along the `4r` axis: input, forget, candidate, output.
    pub fn register<T: Scalar, R: Rng + ?Sized>(cfg: LstmConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.hidden_dim;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let din = if l == 0 { cfg.input_dim } else { r };
            let bound = 1.0 / ((din + r) as f64).sqrt();
            let w = store.push_uniform(format!("lstm{}.weight", l + 1), &[din + r, 4 * r], bound, rng)?;
            let mut bias = vec![T::zero(); 4 * r];
            bias[r..2 * r].iter_mut().for_each(|b| *b = T::one());
            let b = store.push(format!("lstm{}.bias", l + 1), Tensor::from_vec(&[4 * r], bias)?);
            layers.push((w, b));
        }
        Ok(LstmBackbone { cfg, layers })
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x_t: NodeId, state: &LstmState) -> Result<LstmState> {
        if state.h.len() != self.cfg.num_layers || state.c.len() != self.cfg.num_layers {
            return Err(Error::Argument(format!(
                "state has {} layers, backbone has {}",
                state.h.len(),
                self.cfg.num_layers
            )));
        }
        let xd = tape.dims(x_t).to_vec();
        if xd.len() != 2 || xd[1] != self.cfg.input_dim {
            return Err(Error::dim("lstm_step", &xd, &[0, self.cfg.input_dim]));
        }
        let r = self.cfg.hidden_dim;
        let mut input = x_t;
        let mut next = LstmState {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
        };
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let joined = tape.concat_cols(&[input, state.h[l]])?;
            let z = tape.linear(joined, p.id(w), p.id(b))?;
            let zi = tape.slice_cols(z, 0, r)?;
            let zf = tape.slice_cols(z, r, r)?;
            let zg = tape.slice_cols(z, 2 * r, r)?;
            let zo = tape.slice_cols(z, 3 * r, r)?;
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let keep = tape.mul(f, state.c[l])?;
            let write = tape.mul(i, g)?;
            let c = tape.add(keep, write)?;
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc)?;
            next.h.push(h);
            next.c.push(c);
            input = h;
        }
        Ok(next)
    }

    /// Top-layer hidden state after every step; `inputs[t]` is `[B×D]`.
    pub fn unroll<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("LSTM unroll over an empty sequence".into()))?;
        let batch = tape.dims(*first)[0];
        let mut state = LstmState::zeros(tape, &self.cfg, batch)?;
        let mut tops = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.step(tape, p, x, &state)?;
            tops.push(state.top());
        }
        Ok(tops)
    }
}
