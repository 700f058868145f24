mod common;

use common::{synthetic, tiny_model, vocab_for};
use melbert::checkpoint::Checkpoint;
use melbert::error::Error;
use melbert::heads::Variant;
use melbert::model::Model;
use melbert::training::{bagging_cv_train, train, Ensemble, LossKind, TrainConfig, TrainState, Trainer};
use serde_json::json;

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_seq_len: 40,
        epochs,
        peak_lr: 1e-3,
        warmup_fraction: 0.2,
        seeds: vec![1],
        ..Default::default()
    }
}

fn checkpoint(st: &TrainState, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        state: st.clone(),
        train: cfg.clone(),
        meta: json!({ "run": "test" }),
    }
}

#[test]
fn fresh_balanced_loss_is_near_ln2() {
    let (model, data) = tiny_model(Variant::Melbert, 2, 16, 1);
    let t = Trainer::new(small_cfg(1), TrainState::new(model, 1), &data).unwrap();
    let l = t.full_loss().unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 0.1, "{l}");
}

#[test]
fn memorizes_32_instances() {
    let (model, data) = tiny_model(Variant::Melbert, 1, 16, 2);
    let data = &data[..32];
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 200,
        peak_lr: 3e-3,
        warmup_fraction: 0.05,
        dropout_p: 0.0,
        seeds: vec![2],
        ..Default::default()
    };
    let mut model = model;
    cfg.apply_to(&mut model.config);
    let mut t = Trainer::new(cfg, TrainState::new(model, 2), data).unwrap();
    t.run_to_end().unwrap();
    let final_loss = t.full_loss().unwrap();
    assert!(final_loss < 0.05, "training loss {final_loss}");

    let losses: Vec<f64> = t.state.history.iter().map(|r| r.loss).collect();
    let w = 5;
    let smooth: Vec<f64> = losses.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect();
    for e in 5..smooth.len() - 1 {
        assert!(smooth[e + 1] <= smooth[e], "smoothed loss rose at epoch {}: {} -> {}", e + 1, smooth[e], smooth[e + 1]);
    }
}

#[test]
fn resume_equals_uninterrupted() {
    let (model, data) = tiny_model(Variant::Melbert, 1, 8, 3);
    let cfg = small_cfg(3);
    let mut full = Trainer::new(cfg.clone(), TrainState::new(model.clone(), 3), &data).unwrap();
    full.run_to_end().unwrap();

    let mut first = Trainer::new(cfg.clone(), TrainState::new(model, 3), &data).unwrap();
    // stop mid-epoch so the partial epoch accumulator is exercised
    first.run_until(11).unwrap();
    let text = checkpoint(&first.state, &cfg).to_text().unwrap();
    let restored = Checkpoint::from_text(&text, "mem").unwrap();
    let mut second = Trainer::new(restored.train.clone(), restored.state, &data).unwrap();
    second.run_to_end().unwrap();

    assert_eq!(
        checkpoint(&full.state, &cfg).to_text().unwrap(),
        checkpoint(&second.state, &cfg).to_text().unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (model, data) = tiny_model(Variant::NoSpv, 1, 8, 4);
    let cfg = small_cfg(1);
    let mut t = Trainer::new(cfg.clone(), TrainState::new(model, 4), &data).unwrap();
    t.run_until(3).unwrap();
    let ck = checkpoint(&t.state, &cfg);
    let text = ck.to_text().unwrap();
    let back = Checkpoint::from_text(&text, "mem").unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_text().unwrap(), text);
    for (name, p) in ck.state.model.params.iter() {
        let q = back.state.model.params.get(name).unwrap();
        assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let (model, _) = tiny_model(Variant::Seq, 1, 8, 5);
    let text = checkpoint(&TrainState::new(model, 5), &small_cfg(1)).to_text().unwrap();
    assert!(Checkpoint::from_text(&text.replacen("melbert-ckpt v1", "melbert-ckpt v9", 1), "x").is_err());
    assert!(Checkpoint::from_text(&text[..text.len() - 4], "x").is_err());
    let bad = text.replacen("num_heads 2", "num_heads two", 1);
    assert!(matches!(Checkpoint::from_text(&bad, "x"), Err(Error::Format { .. })));
}

#[test]
fn nan_loss_aborts_with_divergence() {
    let (mut model, data) = tiny_model(Variant::Melbert, 1, 8, 6);
    model.params.get_mut("head.out.b").unwrap().data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(small_cfg(1), TrainState::new(model, 6), &data).unwrap();
    match t.step() {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn seeds_change_init_and_order() {
    let data = synthetic(7, 40);
    let vocab = vocab_for(&data, 90);
    let mc = common::model_config(&vocab, Variant::Seq, 1, 2, 8);
    let cfg = small_cfg(1);
    let a = train(&mc, &vocab, &data, &cfg, 1).unwrap();
    let b = train(&mc, &vocab, &data, &cfg, 1).unwrap();
    let c = train(&mc, &vocab, &data, &cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn ensemble_of_identical_models_equals_the_model() {
    let (model, data) = tiny_model(Variant::Melbert, 1, 8, 8);
    let single = model.predict(&data).unwrap();
    let two = Ensemble { models: vec![model.clone(), model.clone()], threshold: 0.5 };
    assert_eq!(two.predict(&data).unwrap(), single);
    let three = Ensemble { models: vec![model.clone(); 3], threshold: 0.5 };
    for (a, b) in three.predict(&data).unwrap().iter().zip(&single) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn bagging_trains_one_model_per_fold() {
    let data = synthetic(9, 60);
    let vocab = vocab_for(&data, 90);
    let mc = common::model_config(&vocab, Variant::Melbert, 1, 2, 8);
    let (ens, states) = bagging_cv_train(&mc, &vocab, &data, 3, &small_cfg(1)).unwrap();
    assert_eq!(ens.models.len(), 3);
    assert_eq!(states.len(), 3);
    assert_ne!(ens.models[0].params, ens.models[1].params);
    let scores = ens.predict(&data).unwrap();
    assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn regression_objective_trains() {
    let (model, mut data) = tiny_model(Variant::Melbert, 1, 8, 10);
    for (i, inst) in data.iter_mut().enumerate() {
        inst.label = if inst.label > 0.5 { 0.8 } else { 0.1 } + 0.01 * (i % 5) as f64;
    }
    let cfg = TrainConfig { loss: LossKind::Mse, ..small_cfg(5) };
    let mut t = Trainer::new(cfg, TrainState::new(model, 10), &data).unwrap();
    let before = t.full_loss().unwrap();
    t.run_to_end().unwrap();
    assert!(t.full_loss().unwrap() < before);
}

#[test]
fn binary_loss_rejects_real_labels() {
    let (model, mut data) = tiny_model(Variant::Melbert, 1, 8, 11);
    data[0].label = 0.3;
    assert!(Trainer::new(small_cfg(1), TrainState::new(model, 11), &data).is_err());
}

#[test]
fn log_records_one_line_per_epoch() {
    let (model, data): (Model, _) = tiny_model(Variant::Seq, 1, 8, 12);
    let mut t = Trainer::new(small_cfg(2), TrainState::new(model, 12), &data).unwrap();
    t.run_to_end().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    melbert::training::write_log(&path, &t.state.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (e, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], e);
        assert!(l["step"].is_u64() && l["lr"].is_f64() && l["loss"].is_f64());
    }
    assert_eq!(lines[1]["lr"], 0.0);
}
