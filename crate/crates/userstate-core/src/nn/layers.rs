//! Parameter storage and the layer types used by the models.

use ndarray::{Array1, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Grads, Graph, Var};
use super::{init, ops};

/// Index of a learnable parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Owns all learnable parameters of one model.
#[derive(Default)]
pub struct ParamStore {
    arrays: Vec<ArrayD<f64>>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: &str, arr: ArrayD<f64>) -> ParamId {
        self.arrays.push(arr);
        self.names.push(name.to_string());
        ParamId(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn array(&self, id: ParamId) -> &ArrayD<f64> {
        &self.arrays[id.0]
    }

    pub fn array_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.arrays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.arrays
            .iter()
            .zip(self.names.iter())
            .enumerate()
            .map(|(i, (a, n))| (ParamId(i), n.as_str(), a))
    }

    pub fn total_scalar_count(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Copies every parameter onto a fresh graph as consecutive leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let first = g.len();
        for arr in &self.arrays {
            g.leaf(arr.clone());
        }
        Bound { first, count: self.arrays.len() }
    }

    /// Copies all parameters into a name-keyed map. Names must be unique.
    pub fn snapshot(&self) -> std::collections::BTreeMap<String, ArrayD<f64>> {
        let mut map = std::collections::BTreeMap::new();
        for (name, arr) in self.names.iter().zip(self.arrays.iter()) {
            let prev = map.insert(name.clone(), arr.clone());
            assert!(prev.is_none(), "duplicate parameter name {name}");
        }
        map
    }

    /// Restores parameter values from a snapshot; every parameter must be
    /// present with a matching shape.
    pub fn restore(
        &mut self,
        map: &std::collections::BTreeMap<String, ArrayD<f64>>,
    ) -> Result<(), String> {
        for (name, arr) in self.names.iter().zip(self.arrays.iter_mut()) {
            let src = map.get(name).ok_or_else(|| format!("missing parameter {name}"))?;
            if src.shape() != arr.shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} does not match stored {:?}",
                    src.shape(),
                    arr.shape()
                ));
            }
            arr.assign(src);
        }
        Ok(())
    }
}

/// Mapping from parameter ids to the leaf vars of one graph.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    first: usize,
    count: usize,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        assert!(id.0 < self.count, "param id out of range for binding");
        Var(self.first + id.0)
    }

    /// Collects per-parameter gradients in store order (`None` = zero).
    pub fn param_grads(&self, grads: &Grads) -> Vec<Option<ArrayD<f64>>> {
        (0..self.count).map(|i| grads.get(Var(self.first + i)).cloned()).collect()
    }
}

/// Forward-pass mode.
///
/// `Train` uses batch statistics in normalization layers; running statistics
/// are only touched when `update_stats` is set, so gradient checks can
/// re-evaluate the loss without side effects. `Infer` uses running
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train { update_stats: bool },
    Infer,
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = ps.alloc(
            &format!("{name}.w"),
            init::he_normal(rng, &[out_c, in_c, k, k], in_c * k * k),
        );
        let b = bias.then(|| ps.alloc(&format!("{name}.b"), init::zeros(&[out_c])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        ops::conv2d(g, x, bound.var(self.w), self.b.map(|b| bound.var(b)), self.stride, self.pad)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    name: String,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = ps.alloc(&format!("{name}.gamma"), init::ones(&[c]));
        let beta = ps.alloc(&format!("{name}.beta"), init::zeros(&[c]));
        BatchNorm2d {
            gamma,
            beta,
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.9,
            eps: 1e-5,
            name: name.to_string(),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, bound: &Bound, x: Var, phase: Phase) -> Var {
        match phase {
            Phase::Train { update_stats } => {
                let m = {
                    let sh = g.val(x).shape();
                    (sh[0] * sh[2] * sh[3]) as f64
                };
                let (y, mean, var) =
                    ops::batchnorm_train(g, x, bound.var(self.gamma), bound.var(self.beta), self.eps);
                if update_stats {
                    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    self.running_mean =
                        &self.running_mean * self.momentum + &mean * (1.0 - self.momentum);
                    self.running_var = &self.running_var * self.momentum
                        + &(var * unbias) * (1.0 - self.momentum);
                }
                y
            }
            Phase::Infer => ops::batchnorm_infer(
                g,
                x,
                bound.var(self.gamma),
                bound.var(self.beta),
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }

    /// Non-learnable state for checkpointing, keyed by stable names.
    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        vec![
            (format!("{}.running_mean", self.name), self.running_mean.clone().into_dyn()),
            (format!("{}.running_var", self.name), self.running_var.clone().into_dyn()),
        ]
    }

    pub fn load_state(&mut self, state: &std::collections::BTreeMap<String, ArrayD<f64>>) {
        if let Some(m) = state.get(&format!("{}.running_mean", self.name)) {
            self.running_mean = m.clone().into_dimensionality().unwrap();
        }
        if let Some(v) = state.get(&format!("{}.running_var", self.name)) {
            self.running_var = v.clone().into_dimensionality().unwrap();
        }
    }
}

pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.alloc(&format!("{name}.w"), init::he_normal(rng, &[in_dim, out_dim], in_dim));
        let b = ps.alloc(&format!("{name}.b"), init::zeros(&[out_dim]));
        Dense { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let y = ops::matmul(g, x, bound.var(self.w));
        ops::add_row_bias(g, y, bound.var(self.b))
    }
}
