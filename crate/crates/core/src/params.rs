//! Named parameter storage and per-tape binding.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    version: u64,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
        self.version = fresh_version();
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Mutable access; counts as a parameter update.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.version = fresh_version();
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.version = fresh_version();
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.version = fresh_version();
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count, optionally restricted to names with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Process-unique tag replaced on every mutation; caches keyed on
    /// parameters compare against it. Not part of equality.
    pub fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape, lazily bound parameters, and the dropout stream.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<&'p str, Var>,
    track_grads: bool,
    pub mode: Mode,
    rng: Option<StreamRng>,
}

impl<'p> Session<'p> {
    /// Eval-mode session; no gradients tracked, dropout disabled.
    pub fn eval(params: &'p ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            track_grads: false,
            mode: Mode::Eval,
            rng: None,
        }
    }

    /// Gradient-tracking session. `rng` drives dropout when `mode` is `Train`.
    pub fn train(params: &'p ParamStore, mode: Mode, rng: StreamRng) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            track_grads: true,
            mode,
            rng: Some(rng),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, value) = self
            .params
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        let v = self.tape.leaf(value.clone(), self.track_grads);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match (&mut self.rng, self.mode) {
            (Some(rng), Mode::Train) => self.tape.dropout(x, p, true, rng),
            _ => Ok(x),
        }
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let w = self.param(weight)?;
        let b = self.param(bias)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    /// Names bound during this pass.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().copied()
    }

    /// Backward from `loss`, returning gradients keyed by parameter name.
    /// Parameters never touched by the pass are absent.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.to_string(), g)))
            .collect())
    }
}
