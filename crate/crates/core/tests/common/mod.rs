#![allow(dead_code)]

use melbert::data::{make_synthetic_corpus, Instance, SyntheticSpec};
use melbert::encoder::{EncoderConfig, Pooling};
use melbert::heads::{ModelInput, Variant};
use melbert::model::{Model, ModelConfig};
use melbert::params::{Mode, ParamStore, Session};
use melbert::rng::{stream, Domain};
use melbert::tokenizer::{train_bpe, Vocab};
use melbert::training::{batch_objective, TrainConfig};
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for relative gradient error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn sentences(data: &[Instance]) -> Vec<String> {
    data.iter().map(|i| i.tokens.join(" ")).collect()
}

pub fn synthetic(seed: u64, n: usize) -> Vec<Instance> {
    make_synthetic_corpus(seed, n, &SyntheticSpec::default())
}

pub fn vocab_for(data: &[Instance], size: usize) -> Vocab {
    train_bpe(&sentences(data), size).unwrap()
}

pub fn model_config(vocab: &Vocab, variant: Variant, layers: usize, heads: usize, d: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: layers,
            num_heads: heads,
            hidden_dim: d,
            ffn_dim: 2 * d,
            max_positions: 40,
            vocab_size: vocab.len(),
            dropout_p: 0.2,
            target_pooling: Pooling::Mean,
        },
        head_dim: d,
        variant,
        max_len: 40,
        threshold: 0.5,
    }
}

pub fn tiny_model(variant: Variant, layers: usize, d: usize, seed: u64) -> (Model, Vec<Instance>) {
    let data = synthetic(seed, 60);
    let vocab = vocab_for(&data, 90);
    let cfg = model_config(&vocab, variant, layers, 2, d);
    (Model::init(cfg, vocab, seed).unwrap(), data)
}

/// Training objective of `batch` under `params`, with the dropout stream
/// fixed so every call sees the same masks.
pub fn objective_value(params: &ParamStore, mcfg: &ModelConfig, batch: &[&ModelInput], cfg: &TrainConfig) -> f64 {
    let mut s = Session::train(params, Mode::Train, stream(99, Domain::Dropout, 0, 0));
    let l = batch_objective(&mut s, mcfg, batch, cfg).unwrap();
    s.tape.value(l).item()
}

/// Central-difference probes of the full training objective. Each probe
/// picks a parameter tensor uniformly, then an element; embedding rows are
/// restricted to ids and positions the batch uses. Returns the worst
/// relative error and the probe description.
pub fn param_gradcheck(model: &Model, batch: &[&ModelInput], cfg: &TrainConfig, probes: usize, seed: u64) -> (f64, String) {
    let mcfg = &model.config;
    let mut s = Session::train(&model.params, Mode::Train, stream(99, Domain::Dropout, 0, 0));
    let loss = batch_objective(&mut s, mcfg, batch, cfg).unwrap();
    let grads = s.param_grads(loss).unwrap();
    drop(s);

    let mut used_ids: Vec<usize> = batch
        .iter()
        .flat_map(|b| {
            let t = b.target.iter().flat_map(|t| t.ids.iter());
            b.sentence.ids.iter().chain(t).map(|&i| i as usize)
        })
        .collect();
    used_ids.sort_unstable();
    used_ids.dedup();
    let max_len = batch.iter().map(|b| b.sentence.len()).max().unwrap();

    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut rng = stream(seed, Domain::Test, 1, 0);
    let mut params = model.params.clone();
    let mut worst = (0.0, String::new());
    for _ in 0..probes {
        let name = &names[rng.random_range(0..names.len())];
        let t = params.get(name).unwrap().clone();
        let idx = match name.as_str() {
            "emb.token" => used_ids[rng.random_range(0..used_ids.len())] * t.cols() + rng.random_range(0..t.cols()),
            "emb.position" => rng.random_range(0..max_len) * t.cols() + rng.random_range(0..t.cols()),
            _ => rng.random_range(0..t.len()),
        };
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[idx]);
        let orig = t.data()[idx];
        params.get_mut(name).unwrap().data_mut()[idx] = orig + FD_STEP;
        let up = objective_value(&params, mcfg, batch, cfg);
        params.get_mut(name).unwrap().data_mut()[idx] = orig - FD_STEP;
        let down = objective_value(&params, mcfg, batch, cfg);
        params.get_mut(name).unwrap().data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(analytic, numeric);
        if e > worst.0 {
            worst = (e, format!("{name}[{idx}]: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    worst
}
