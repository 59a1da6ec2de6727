mod common;

use adoc_core::datagen::{generate_dataset, DomainSpec};
use adoc_core::training::{self, lr_at_epoch, mean_loss, run_protocol, train, train_step, EvalSet, RunLog, Scenario, TrainState};
use adoc_core::{DomainId, Error, LabelSeq, ModelConfig, TrainConfig, TrainMode, SOURCE_DOMAIN};
use common::fixtures::{samples, tiny_model};
use proptest::prelude::*;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        warmup_epochs: 0,
        base_lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_reproduces_decay_blocks() {
    let cfg = TrainConfig::default();
    let base = cfg.base_lr;
    let want = [0.5 * base, base, base, base, base];
    for (e, w) in want.iter().enumerate() {
        assert_eq!(lr_at_epoch(&cfg, e), *w, "epoch {e}");
    }
    for e in 5..10 {
        assert_eq!(lr_at_epoch(&cfg, e), base * 0.1);
    }
    for e in 10..15 {
        assert_eq!(lr_at_epoch(&cfg, e), base * 0.1 * 0.1);
    }
}

proptest! {
    #[test]
    fn schedule_never_increases_after_warmup(warmup in 0usize..4, period in 1usize..7, factor in 0.01f64..1.0, e in 0usize..40) {
        let cfg = TrainConfig { warmup_epochs: warmup, decay_period: period, decay_factor: factor, epochs: 50, ..TrainConfig::default() };
        if e >= warmup.max(1) {
            prop_assert!(lr_at_epoch(&cfg, e + 1) <= lr_at_epoch(&cfg, e));
        }
    }
}

#[test]
fn one_step_lowers_the_batch_loss() {
    let base = tiny_model(0);
    let data = samples(&base.config, 4, 11);
    let batch: Vec<_> = data.iter().collect();
    let before = mean_loss(&base, &data, SOURCE_DOMAIN).unwrap();
    let mut lr = 1e-2;
    loop {
        let mut m = base.clone();
        m.set_train_mode(TrainMode::Backbone).unwrap();
        let mut adam = Default::default();
        let reported = train_step(&mut m, &batch, SOURCE_DOMAIN, &mut adam, lr).unwrap();
        assert_eq!(reported, before);
        if mean_loss(&m, &data, SOURCE_DOMAIN).unwrap() < before {
            break;
        }
        lr /= 10.0;
        assert!(lr > 1e-9, "no learning rate lowered the loss");
    }
}

#[test]
fn equal_seeds_give_identical_reports_and_logs() {
    let run = || {
        let mut m = tiny_model(0);
        let data = samples(&m.config, 10, 3);
        let test = samples(&m.config, 4, 4);
        let mut st = TrainState::new(TrainMode::Backbone, quick(3)).unwrap();
        let mut log = RunLog::new(Vec::new(), &m.config, &st).unwrap();
        let evals = [EvalSet { name: "a", domain: SOURCE_DOMAIN, samples: &test }];
        let reports = train(&mut m, &data, &mut st, &evals, |_, _, r| log.epoch(r)).unwrap();
        (reports, log.into_inner(), m)
    };
    let (r1, l1, m1) = run();
    let (r2, l2, m2) = run();
    assert_eq!(r1.len(), 3);
    assert!(r1.iter().all(|r| r.mean_loss.is_finite() && r.eval.len() == 1));
    let strip = |r: &[training::EpochReport]| r.iter().map(|r| (r.epoch, r.mean_loss.to_bits(), r.lr.to_bits(), r.eval.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&r1), strip(&r2));
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
    let text = String::from_utf8(l1).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["record"], "config");
    assert_eq!(first["train"]["batch_size"], 4);
    let epoch: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(epoch["record"], "epoch");
    assert!(epoch.get("wall_secs").is_none());
}

#[test]
fn different_seeds_shuffle_differently() {
    let run = |seed| {
        let mut m = tiny_model(0);
        let data = samples(&m.config, 10, 3);
        let mut st = TrainState::new(TrainMode::Backbone, TrainConfig { seed, ..quick(1) }).unwrap();
        train(&mut m, &data, &mut st, &[], |_, _, _| Ok(())).unwrap();
        m
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn evaluation_has_no_side_effects() {
    let m = tiny_model(1);
    let data = samples(&m.config, 5, 8);
    let snapshot = m.clone();
    let a = mean_loss(&m, &data, DomainId(1)).unwrap();
    let b = mean_loss(&m, &data, DomainId(1)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    training::evaluate(&m, &data, DomainId(1)).unwrap();
    assert_eq!(m, snapshot);
}

#[test]
fn infeasible_label_names_the_sample() {
    let mut m = tiny_model(0);
    let mut data = samples(&m.config, 6, 2);
    let steps = m.config.feature_width();
    data[3].label = LabelSeq::new(vec![1; steps]).unwrap();
    let mut st = TrainState::new(TrainMode::Backbone, quick(1)).unwrap();
    match train(&mut m, &data, &mut st, &[], |_, _, _| Ok(())) {
        Err(Error::InfeasibleLabel { sample, timesteps, .. }) => {
            assert_eq!(sample, Some(3));
            assert_eq!(timesteps, steps);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_finite_values_abort_training() {
    let mut m = tiny_model(0);
    let id = m.shared_ids()[0];
    m.store.tensor_mut(id).data_mut()[0] = f64::NAN;
    let data = samples(&m.config, 4, 2);
    let mut st = TrainState::new(TrainMode::Backbone, quick(1)).unwrap();
    assert!(matches!(train(&mut m, &data, &mut st, &[], |_, _, _| Ok(())), Err(Error::NonFinite(_))));
}

#[test]
fn protocol_runs_end_to_end_on_a_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let specs: Vec<_> = DomainSpec::defaults()
        .into_iter()
        .map(|mut s| {
            s.train_count = 6;
            s.test_count = 3;
            s
        })
        .collect();
    let cfg = ModelConfig::desk();
    generate_dataset(&specs, dir.path(), 5, cfg.feature_width()).unwrap();
    let tc = TrainConfig { epochs: 1, warmup_epochs: 0, batch_size: 3, ..TrainConfig::default() };
    let report = run_protocol(Scenario::Exp1, dir.path(), &cfg, &tc).unwrap();
    assert!(report.source_unchanged);
    let params = |stage: &str| report.rows.iter().find(|r| r.stage == stage).unwrap().trainable_params;
    assert!(params("adapter(noisy-inverse)") < params("finetune(noisy-inverse)"));
    assert_eq!(report.rows.iter().filter(|r| r.stage == "backbone").count(), 3);
    let table = report.table();
    for col in ["Evaluation Dataset", "Character Accuracy", "Word Accuracy", "Recall", "Trainable Params"] {
        assert!(table.contains(col));
    }
    let exp2 = run_protocol(Scenario::Exp2, dir.path(), &cfg, &tc).unwrap();
    assert_eq!(exp2.scenario, Scenario::Exp2);

    let missing = dir.path().join("nope");
    assert!(matches!(run_protocol(Scenario::Exp1, &missing, &cfg, &tc), Err(Error::Io { .. })));
}
