//! Named parameter storage and the per-forward-pass graph context.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are bound as constants and never updated.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrites values from `other`, which must have identical names and
    /// shapes in the same order.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Truncated normal at ±2σ by rejection.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("trunc_normal: invalid shape")
}

/// How top-k survivor sets are chosen during a forward pass.
///
/// Selection is piecewise constant in the scores, so a finite-difference
/// check must evaluate perturbed points with the survivor sets of the base
/// point; `Record` captures them and `Replay` feeds them back in order.
#[derive(Clone, Debug, Default)]
pub enum Selection {
    #[default]
    Free,
    Record(Vec<Vec<bool>>),
    Replay {
        sets: Vec<Vec<bool>>,
        next: usize,
    },
}

/// Attention weights captured for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTrace {
    pub label: String,
    /// Per-mask (or single dense) weight rows, one row per head.
    pub weights: Vec<Tensor>,
    pub survivors: Vec<Vec<bool>>,
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    pub selection: Selection,
    pub trace: Option<Vec<AttnTrace>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            selection: Selection::Free,
            trace: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf for a parameter; frozen parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.params.params[id.0];
        let v = if p.frozen {
            self.tape.constant(p.value.clone())
        } else {
            self.tape.leaf(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Top-`k` survivors of `scores` (ties to the lower index), subject to
    /// the active [`Selection`] policy.
    pub fn select_top_k(&mut self, scores: &[f64], k: usize) -> Vec<bool> {
        match &mut self.selection {
            Selection::Replay { sets, next } => {
                let s = sets[*next].clone();
                *next += 1;
                s
            }
            Selection::Free => top_k_mask(scores, k),
            Selection::Record(sets) => {
                let s = top_k_mask(scores, k);
                sets.push(s.clone());
                s
            }
        }
    }

    /// Backward from `loss`; returns one gradient per parameter, zero-filled
    /// for frozen or unused parameters.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(id, p)| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect())
    }
}

/// Boolean mask of the `k` largest entries; equal scores keep the lower index.
pub fn top_k_mask(scores: &[f64], k: usize) -> Vec<bool> {
    let k = k.clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    keep
}
