use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Tape, Var};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable and counted by the L2 penalty.
    Weight,
    /// Trainable, excluded from L2.
    Bias,
    /// Never updated and never differentiated.
    Frozen,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Frozen => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamKind::Weight),
            1 => Some(ParamKind::Bias),
            2 => Some(ParamKind::Frozen),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    value: Arc<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Copy-on-write access; cheap once no tape holds a reference.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }
}

/// Named parameter storage shared read-only by forward passes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            value: Arc::new(value),
        });
        id
    }

    /// `rows × cols` weight drawn from the Glorot-uniform range.
    pub fn weight<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let r = glorot_bound(rows, cols);
        let data = (0..rows * cols).map(|_| rng.gen_range(-r..r)).collect();
        let t = Tensor::matrix(rows, cols, data).expect("weight shape");
        self.insert(name, ParamKind::Weight, t)
    }

    /// Zero-initialised `1 × n` bias.
    pub fn bias(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.insert(name, ParamKind::Bias, Tensor::zeros(1, n))
    }

    pub fn frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name, ParamKind::Frozen, value)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, p)| p.kind != ParamKind::Frozen)
            .map(|(id, _)| id)
    }

    /// Sum of squares over every `Weight` parameter.
    pub fn weight_sum_squares(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One forward pass: a fresh tape bound lazily to a parameter snapshot, plus
/// the train flag and the RNG that drives dropout.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub train: bool,
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, train: bool, dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inference graph: no dropout.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, 0.0, 0)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape node for a parameter, inserted on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.shared_leaf(Arc::clone(&p.value), p.kind != ParamKind::Frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        let (rate, train) = (self.dropout, self.train);
        self.tape.dropout(x, rate, train, &mut self.rng)
    }

    /// Gradients for every parameter the loss touched.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }

    /// `x · W + b` for a `rows × in` input.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w);
        let y = self.tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.tape.add(y, bv)
            }
            None => Ok(y),
        }
    }
}
