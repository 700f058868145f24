//! Adam with a warmup-then-linear-decay schedule, a step-addressable epoch
//! loop, multi-seed runs and k-fold bagging.
//!
//! All randomness is addressed by position: epoch `e` visits the data in the
//! order drawn from `stream(seed, Shuffle, e, 0)`, and the dropout masks of
//! global step `s` come from `stream(seed, Dropout, s, 0)`. A run restored
//! at step `s` therefore continues exactly as the uninterrupted run would.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{kfold_split, select, Instance};
use crate::error::{Error, Result};
use crate::heads::{self, forward_variant, ModelInput};
use crate::model::{Model, ModelConfig, TargetCache};
use crate::params::{Mode, ParamStore, Session};
use crate::rng::{self, Domain};
use crate::tensor::{Tensor, Var};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Weighted binary cross-entropy on binary labels.
    Bce,
    /// Mean squared error on real-valued targets.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Copied into the model's `max_len` when a run builds its model.
    pub max_seq_len: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Copied into the encoder's `dropout_p` when a run builds its model.
    pub dropout_p: f64,
    pub pos_weight: f64,
    pub seeds: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_seq_len: 150,
            epochs: 3,
            peak_lr: 3e-4,
            warmup_fraction: 2.0 / 3.0,
            dropout_p: 0.2,
            pos_weight: 1.0,
            seeds: vec![1, 2, 3, 4, 5],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            loss: LossKind::Bce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(self.pos_weight >= 1.0 && self.pos_weight.is_finite()) {
            return fail(format!("pos_weight {} must be >= 1", self.pos_weight));
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return fail(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    /// Copies the run-level sequence length and dropout rate into `model`.
    pub fn apply_to(&self, model: &mut ModelConfig) {
        model.max_len = self.max_seq_len;
        model.encoder.dropout_p = self.dropout_p;
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps_per_epoch(n) * self.epochs as u64
    }

    /// Rounded warmup length, kept below `total_steps` so the schedule
    /// still ends at zero.
    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        let w = (self.warmup_fraction * total_steps as f64).round() as u64;
        w.min(total_steps.saturating_sub(1))
    }
}

/// Learning rate at `step` of `total_steps`: linear from 0 to `peak_lr` over
/// the warmup steps, then linear down to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(total_steps);
    let warm = cfg.warmup_steps(total_steps);
    if step <= warm {
        if warm == 0 {
            return cfg.peak_lr;
        }
        cfg.peak_lr * (step as f64 / warm as f64)
    } else {
        cfg.peak_lr * ((total_steps - step) as f64 / (total_steps - warm) as f64)
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// updated as if their gradient were zero.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    /// Rate used by the epoch's last update.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

/// Everything needed to continue a run from `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub seed: u64,
    pub step: u64,
    pub history: Vec<EpochRecord>,
    /// Running loss sum and batch count of the current epoch.
    pub epoch_loss: (f64, u64),
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        TrainState {
            model,
            adam: AdamState::default(),
            seed,
            step: 0,
            history: Vec::new(),
            epoch_loss: (0.0, 0),
        }
    }
}

/// Batch loss of `scores` under the configured objective.
fn objective(tape: &mut crate::tensor::Tape, scores: Var, labels: &[f64], cfg: &TrainConfig) -> Result<Var> {
    match cfg.loss {
        LossKind::Bce => heads::bce_loss(tape, scores, labels, cfg.pos_weight),
        LossKind::Mse => heads::mse_loss(tape, scores, labels),
    }
}

/// Loss of one batch on the session's tape. A target word occurring more
/// than once in the batch is encoded once and its `v_t` shared.
pub fn batch_objective(
    s: &mut Session<'_>,
    model_cfg: &ModelConfig,
    batch: &[&ModelInput],
    cfg: &TrainConfig,
) -> Result<Var> {
    let mut memo: HashMap<&[TokenId], Var> = HashMap::new();
    let mut scores = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for input in batch {
        let v_t = match (&input.target, model_cfg.variant.needs_target()) {
            (Some(t), true) => Some(match memo.get(t.target_ids()) {
                Some(&v) => v,
                None => {
                    let v = heads::encode_target(s, &model_cfg.encoder, t)?;
                    memo.insert(t.target_ids(), v);
                    v
                }
            }),
            _ => None,
        };
        scores.push(forward_variant(s, model_cfg.variant, &model_cfg.encoder, input, v_t)?);
        labels.push(input.label);
    }
    let p = if scores.len() == 1 { scores[0] } else { s.tape.concat(&scores, 0)? };
    objective(&mut s.tape, p, &labels, cfg)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainState,
    inputs: Vec<ModelInput>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, state: TrainState, data: &[Instance]) -> Result<Trainer> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if cfg.loss == LossKind::Bce {
            if let Some(bad) = data.iter().find(|i| i.label != 0.0 && i.label != 1.0) {
                return Err(Error::contract(format!(
                    "label {} of `{}` is not binary; use the mse loss for real-valued targets",
                    bad.label, bad.sentence_id
                )));
            }
        }
        let inputs = state.model.prepare_all(data)?;
        Ok(Trainer { cfg, state, inputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.cfg.steps_per_epoch(self.inputs.len())
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.total_steps(self.inputs.len())
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        (self.state.step / self.steps_per_epoch()) as usize
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.inputs.len()).collect();
        rng::shuffle(&mut order, &mut rng::stream(self.state.seed, Domain::Shuffle, epoch as u64, 0));
        order
    }

    /// Runs one optimizer step and returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        if self.finished() {
            return Err(Error::contract("training already finished"));
        }
        let spe = self.steps_per_epoch();
        let step = self.state.step;
        let epoch = (step / spe) as usize;
        let b = (step % spe) as usize;
        let order = self.epoch_order(epoch);
        let idx = &order[b * self.cfg.batch_size..((b + 1) * self.cfg.batch_size).min(order.len())];

        let model = &self.state.model;
        let dropout = rng::stream(self.state.seed, Domain::Dropout, step, 0);
        let mut s = Session::train(&model.params, Mode::Train, dropout);
        let batch: Vec<&ModelInput> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let loss = batch_objective(&mut s, &model.config, &batch, &self.cfg)?;
        let value = s.tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("batch loss is {value} in epoch {epoch}"),
            });
        }
        let mut grads = s.param_grads(loss)?;
        drop(s);
        if let Some(bad) = grads.iter().find(|(_, g)| !g.is_finite()).map(|(n, _)| n.clone()) {
            return Err(Error::Divergence {
                step,
                msg: format!("non-finite gradient for `{bad}`"),
            });
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let total = self.total_steps();
        let lr = lr_at(step + 1, total, &self.cfg);
        adam_step(&mut self.state.model.params, &grads, &mut self.state.adam, lr, &self.cfg)?;

        self.state.step += 1;
        self.state.epoch_loss.0 += value;
        self.state.epoch_loss.1 += 1;
        if self.state.step.is_multiple_of(spe) {
            let (sum, n) = self.state.epoch_loss;
            self.state.history.push(EpochRecord {
                epoch,
                step: self.state.step,
                lr,
                loss: sum / n as f64,
            });
            self.state.epoch_loss = (0.0, 0);
        }
        Ok(value)
    }

    /// Steps until `step` (clamped to the end of training).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        let stop = step.min(self.total_steps());
        while self.state.step < stop {
            self.step()?;
        }
        Ok(())
    }

    /// Finishes the current epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let spe = self.steps_per_epoch();
        let end = (self.state.step / spe + 1) * spe;
        self.run_until(end)?;
        self.state
            .history
            .last()
            .cloned()
            .ok_or_else(|| Error::contract("no epoch completed"))
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }

    /// Eval-mode objective over the whole training set.
    pub fn full_loss(&self) -> Result<f64> {
        mean_loss(&self.state.model, &self.inputs, &self.cfg)
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

/// Eval-mode (no dropout) objective of `model` over prepared inputs.
pub fn mean_loss(model: &Model, inputs: &[ModelInput], cfg: &TrainConfig) -> Result<f64> {
    let scores = model.score_inputs(inputs, &mut TargetCache::new())?;
    let labels: Vec<f64> = inputs.iter().map(|i| i.label).collect();
    match cfg.loss {
        LossKind::Bce => heads::bce_value(&scores, &labels, cfg.pos_weight),
        LossKind::Mse => heads::mse_value(&scores, &labels),
    }
}

/// Builds the model for one seed, applying the run-level overrides.
pub fn init_model(model_cfg: &ModelConfig, vocab: &Vocab, cfg: &TrainConfig, seed: u64) -> Result<Model> {
    let mut mc = model_cfg.clone();
    cfg.apply_to(&mut mc);
    Model::init(mc, vocab.clone(), seed)
}

/// A full run from fresh initialization under `seed`.
pub fn train(model_cfg: &ModelConfig, vocab: &Vocab, data: &[Instance], cfg: &TrainConfig, seed: u64) -> Result<TrainState> {
    let model = init_model(model_cfg, vocab, cfg, seed)?;
    let mut t = Trainer::new(cfg.clone(), TrainState::new(model, seed), data)?;
    t.run_to_end()?;
    Ok(t.into_state())
}

/// One run per configured seed.
pub fn train_seeds(model_cfg: &ModelConfig, vocab: &Vocab, data: &[Instance], cfg: &TrainConfig) -> Result<Vec<TrainState>> {
    cfg.seeds.iter().map(|&s| train(model_cfg, vocab, data, cfg, s)).collect()
}

/// One JSON object per epoch: `{"epoch","step","lr","loss"}`.
pub fn write_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in history {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Mean of per-model score vectors.
pub fn ensemble_mean(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = scores.first().ok_or_else(|| Error::contract("empty ensemble"))?;
    if scores.iter().any(|s| s.len() != first.len()) {
        return Err(Error::contract("ensemble members scored different instance counts"));
    }
    let k = scores.len() as f64;
    Ok((0..first.len())
        .map(|i| scores.iter().map(|s| s[i]).sum::<f64>() / k)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub models: Vec<Model>,
    pub threshold: f64,
}

impl Ensemble {
    pub fn predict(&self, instances: &[Instance]) -> Result<Vec<f64>> {
        let all = self
            .models
            .iter()
            .map(|m| m.predict(instances))
            .collect::<Result<Vec<_>>>()?;
        ensemble_mean(&all)
    }

    pub fn label(&self, score: f64) -> u8 {
        u8::from(score > self.threshold)
    }
}

/// Trains one model per fold on that fold's training part. Every fold uses
/// the first configured seed.
pub fn bagging_cv_train(
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    data: &[Instance],
    k: usize,
    cfg: &TrainConfig,
) -> Result<(Ensemble, Vec<TrainState>)> {
    let seed = *cfg.seeds.first().ok_or_else(|| Error::config("at least one seed is required"))?;
    let folds = kfold_split(data, k, seed)?;
    let mut states = Vec::with_capacity(k);
    for fold in &folds {
        states.push(train(model_cfg, vocab, &select(data, &fold.train), cfg, seed)?);
    }
    let ensemble = Ensemble {
        models: states.iter().map(|s| s.model.clone()).collect(),
        threshold: model_cfg.threshold,
    };
    Ok((ensemble, states))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig {
            peak_lr: 3e-5,
            ..cfg()
        };
        let total = 300;
        assert_eq!(lr_at(0, total, &c), 0.0);
        assert_eq!(lr_at(200, total, &c), 3e-5);
        assert_eq!(lr_at(total, total, &c), 0.0);
        assert!(lr_at(100, total, &c) < 3e-5 && lr_at(250, total, &c) < 3e-5);
    }

    #[test]
    fn adam_single_scalar_matches_hand_formula() {
        let c = cfg();
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0]));
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::vector(vec![0.5]));
        let mut st = AdamState::default();
        adam_step(&mut p, &g, &mut st, 0.01, &c).unwrap();
        let m = 0.1 * 0.5;
        let v = 0.001 * 0.25;
        let want = 1.0 - 0.01 * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
        assert_eq!(p.get("x").unwrap().data()[0], want);
    }

    #[test]
    fn adam_zero_grads_from_rest_leave_params() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, -2.0]));
        let mut st = AdamState::default();
        adam_step(&mut p, &BTreeMap::new(), &mut st, 0.1, &cfg()).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { warmup_fraction: 1.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { pos_weight: 0.5, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn ensemble_of_constants() {
        let e = ensemble_mean(&[vec![0.2, 0.2], vec![0.8, 0.8]]).unwrap();
        assert!(e.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        assert!(ensemble_mean(&[vec![0.2], vec![0.8, 0.1]]).is_err());
    }
}
