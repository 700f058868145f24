//! Zero-shot transfer between synthetic corpora that share field stems but
//! no surface word.

mod common;

use std::sync::OnceLock;

use melbert::data::{make_synthetic_corpus, Instance, SyntheticSpec};
use melbert::evaluation::{evaluate, zero_shot_eval};
use melbert::heads::Variant;
use melbert::model::{Model, ModelConfig};
use melbert::tokenizer::train_bpe;
use melbert::training::{train, TrainConfig};
use serde_json::Value;

fn corpus(seed: u64, n: usize, lexicon_variant: usize) -> Vec<Instance> {
    make_synthetic_corpus(seed, n, &SyntheticSpec { lexicon_variant, ..Default::default() })
}

/// MELBERT trained on lexicon 0 with a vocabulary small enough that stems
/// survive as sub-tokens.
fn source_model() -> &'static (Model, Vec<Instance>) {
    static M: OnceLock<(Model, Vec<Instance>)> = OnceLock::new();
    M.get_or_init(|| {
        let a = corpus(1, 1500, 0);
        let vocab = train_bpe(&common::sentences(&a), 60).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            max_seq_len: 64,
            seeds: vec![1],
            ..Default::default()
        };
        let mut mc = ModelConfig::desk(vocab.len(), Variant::Melbert);
        mc.encoder.max_positions = 64;
        let st = train(&mc, &vocab, &a, &cfg, 1).unwrap();
        (st.model, a)
    })
}

#[test]
fn transfers_above_constant_positive_baseline() {
    let (model, _) = source_model();
    let b = corpus(2, 400, 1);
    let before = model.params.clone();
    let r = zero_shot_eval(model, &b).unwrap();
    assert_eq!(model.params, before);
    let p = b.iter().filter(|i| i.is_metaphor()).count() as f64 / b.len() as f64;
    let baseline = 2.0 * p / (1.0 + p);
    assert!(r.overall.f1 > baseline, "transfer F1 {} vs baseline {baseline}", r.overall.f1);
    assert!(r.unk_rate < 0.2, "{}", r.unk_rate);
}

#[test]
fn same_corpus_transfer_equals_in_domain_eval() {
    let (model, a) = source_model();
    let held = &a[..200];
    assert_eq!(zero_shot_eval(model, held).unwrap(), evaluate(model, held, &[], Value::Null).unwrap());
}

#[test]
fn all_unknown_targets_complete_and_are_flagged() {
    let (model, _) = source_model();
    let mut b = corpus(3, 50, 1);
    for inst in &mut b {
        let t = inst.target_index;
        inst.tokens[t] = "QZQ".into();
    }
    let r = zero_shot_eval(model, &b).unwrap();
    assert_eq!(r.target_unk_rate, 1.0);
    assert_eq!(r.overall.total(), 50);
}
