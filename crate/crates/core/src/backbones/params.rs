use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{NodeId, Tape, Tensor};
use crate::scalar::Scalar;

/// A named learnable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of learnable arrays. Order is fixed at construction
/// and defines the checkpoint layout and the optimizer state layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub(crate) fn push_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        Ok(self.push(name, Tensor::from_vec(dims, data)?))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn at(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            ids: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Like [`ParamStore::bind`] with a per-parameter trainable flag.
    pub fn bind_masked(&self, tape: &mut Tape<T>, trainable: &[bool]) -> Bound {
        Bound {
            ids: self
                .params
                .iter()
                .zip(trainable)
                .map(|(p, &t)| tape.leaf(p.value.clone(), t))
                .collect(),
        }
    }

    pub(crate) fn to_named(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                dims: p.value.dims().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect()
    }

    /// Overwrites values from stored arrays whose names and shapes must match
    /// this layout one to one.
    pub(crate) fn load_named(&mut self, stored: &[NamedArray]) -> Result<()> {
        if stored.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, configuration expects {}",
                stored.len(),
                self.params.len()
            )));
        }
        for (p, s) in self.params.iter_mut().zip(stored) {
            if p.name != s.name || p.value.dims() != s.dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "array {:?} {:?} does not match expected {:?} {:?}",
                    s.name,
                    s.dims,
                    p.name,
                    p.value.dims()
                )));
            }
            p.value = Tensor::from_f64(&s.dims, &s.data)?;
        }
        Ok(())
    }
}

/// Tape handles of a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Wraps handles created elsewhere, e.g. by a gradient-check harness;
    /// they must follow the store order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Bound { ids }
    }

    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Serialized form of one parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}
