//! Acceptance checks, one line per criterion. Runs as its own binary so the
//! result lines always reach stdout; exits non-zero if any check fails.

mod common;

use std::time::Instant;

use adoc_core::ctc::{self, ctc_loss, ctc_oracle};
use adoc_core::datagen::{self, generate_dataset, DomainSpec};
use adoc_core::metrics::{char_alignment, evaluate_pairs, CharCounts};
use adoc_core::persist::{decode_checkpoint, encode_checkpoint, enumerate_params, load_checkpoint, save_checkpoint};
use adoc_core::training::{self, lr_at_epoch, train, EvalSet, RunLog, TrainState};
use adoc_core::{DomainId, DomainInit, Model, ModelConfig, Tensor, TrainConfig, TrainMode, SOURCE_DOMAIN};
use common::fixtures::{images, logit_bits, samples, tiny_model};
use common::gradcheck::{check_op, end_to_end_rel_err, op_cases};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 250 {
        let t = rng.gen_range(1..=5);
        let k = rng.gen_range(2..=4);
        let len = rng.gen_range(0..=t);
        let label: Vec<u32> = (0..len).map(|_| rng.gen_range(1..k as u32)).collect();
        if ctc::min_timesteps(&label) > t {
            continue;
        }
        let logits = Tensor::new([t, k], (0..t * k).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let p = logits.softmax_rows().unwrap();
        let lp = Tensor::new([t, k], p.data().iter().map(|v| v.ln()).collect()).unwrap();
        let err = (ctc_loss(&lp, &label).unwrap() - ctc_oracle(&lp, &label).unwrap()).abs();
        worst = worst.max(err);
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-10 && secs < 10.0, format!("{checked} instances, max |diff| {worst:.2e}, {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cases = op_cases();
    let mut worst_op = (0.0f64, "");
    for c in &cases {
        let e = check_op(c);
        if e > worst_op.0 || e.is_nan() {
            worst_op = (e, c.name);
        }
    }
    let e2e = [1, 2, 3].map(end_to_end_rel_err).into_iter().fold(0.0f64, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.0 < 1e-4 && e2e < 1e-3 && secs < 60.0,
        format!(
            "{} ops, worst per-op rel err {:.2e} ({}), end-to-end {:.2e}, {secs:.2}s",
            cases.len(),
            worst_op.0,
            worst_op.1,
            e2e
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut m = Model::new(ModelConfig::default()).unwrap();
    m.register_domain("source", DomainInit::Random).unwrap();
    let d = m.register_domain("new", DomainInit::ZeroIdentity).unwrap();
    let xs = images(&m.config, 20, 3);
    let same = logit_bits(&m, &xs, d) == logit_bits(&m, &xs, SOURCE_DOMAIN);
    outcome(same, format!("20 inputs on the default config, bit-identical: {same}"))
}

fn criterion_5() -> Outcome {
    let mut m = Model::new(ModelConfig::default()).unwrap();
    m.register_domain("source", DomainInit::Random).unwrap();
    let d = m.register_domain("target", DomainInit::ZeroIdentity).unwrap();
    let adapter = m.count_trainable_params(TrainMode::Adapter(d)).unwrap();
    let finetune = m.count_trainable_params(TrainMode::Finetune(d)).unwrap();
    let stored = enumerate_params(&encode_checkpoint(&m, None)).unwrap();
    let prefix = format!("domain/{d}/");
    let in_bank: usize = stored.iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(_, c)| c).sum();
    let shared: usize = stored.iter().filter(|(n, _)| !n.starts_with("domain/")).map(|(_, c)| c).sum();
    let ratio = adapter as f64 / finetune as f64;
    let reconciled = in_bank == adapter && shared + in_bank == finetune;
    outcome(
        ratio <= 0.5 && reconciled,
        format!(
            "adapter {adapter} / finetune {finetune} = {:.2}% (reduction {:.2}%), checkpoint enumeration agrees: {reconciled}",
            100.0 * ratio,
            100.0 * (1.0 - ratio)
        ),
    )
}

fn criterion_7() -> Outcome {
    let c = |s: &str| s.chars().collect::<Vec<_>>();
    let k = |tp, fp, fn_| CharCounts { tp, fp, fn_ };
    let mut ok = char_alignment(&c("abc"), &c("abc")) == k(3, 0, 0)
        && char_alignment(&c("abc"), &c("abd")) == k(2, 1, 1)
        && char_alignment(&c("abc"), &c("")) == k(0, 0, 3)
        && char_alignment(&c("ab"), &c("abxy")) == k(2, 2, 0);
    // Ratios compared as exact rationals: tp * den == num * (tp + fp).
    let r = evaluate_pairs(&[(c("abc"), c("abd"))]);
    ok &= r.counts.tp * 3 == 2 * (r.counts.tp + r.counts.fp) && r.counts.tp * 3 == 2 * (r.counts.tp + r.counts.fn_);
    ok &= r.char_accuracy == 2.0 / 3.0 && r.recall == 2.0 / 3.0;
    let r = evaluate_pairs(&[(c("ab"), c("abxy"))]);
    ok &= r.recall == 1.0 && r.char_accuracy == 0.5;
    let r = evaluate_pairs(&[(c("abc"), c("abc")), (c("ab"), c("ba"))]);
    ok &= r.exact * 2 == r.samples && r.word_accuracy == 0.5;
    let r = evaluate_pairs(&[(c("abc"), c(""))]);
    ok &= r.char_accuracy == 0.0 && r.recall == 0.0;
    outcome(ok, "alignment counts, precision, recall and word accuracy examples")
}

fn criterion_8() -> Outcome {
    let cfg = TrainConfig { batch_size: 3, epochs: 4, warmup_epochs: 1, base_lr: 1e-2, seed: 42, ..TrainConfig::default() };
    let mode = TrainMode::Adapter(DomainId(1));
    let base = tiny_model(1);
    let data = samples(&base.config, 9, 5);
    let test = samples(&base.config, 4, 6);
    let run = |save_at: Option<(usize, &std::path::Path)>| {
        let mut m = base.clone();
        let mut st = TrainState::new(mode, cfg.clone()).unwrap();
        let mut log = RunLog::new(Vec::new(), &m.config, &st).unwrap();
        let evals = [EvalSet { name: "b", domain: DomainId(1), samples: &test }];
        let reports = train(&mut m, &data, &mut st, &evals, |m, s, r| {
            if let Some((e, p)) = save_at {
                if r.epoch == e {
                    save_checkpoint(m, Some(s), p)?;
                }
            }
            log.epoch(r)
        })
        .unwrap();
        (m, reports, log.into_inner())
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let (m1, r1, log1) = run(None);
    let (_, _, log2) = run(Some((1, &path)));
    let logs_equal = log1 == log2;

    let bytes = encode_checkpoint(&m1, None);
    let back = decode_checkpoint(&bytes).unwrap();
    let xs = images(&m1.config, 10, 7);
    let round_trip = back.model == m1
        && encode_checkpoint(&back.model, None) == bytes
        && logit_bits(&back.model, &xs, DomainId(1)) == logit_bits(&m1, &xs, DomainId(1));

    let ck = load_checkpoint(&path).unwrap();
    let (mut m, mut st) = (ck.model, ck.train.unwrap());
    let rest = train(&mut m, &data, &mut st, &[EvalSet { name: "b", domain: DomainId(1), samples: &test }], |_, _, _| Ok(())).unwrap();
    let key = |r: &training::EpochReport| (r.epoch, r.mean_loss.to_bits(), r.lr.to_bits(), r.eval.clone());
    let resumed = rest.iter().map(key).eq(r1[2..].iter().map(key)) && m == m1;
    outcome(
        logs_equal && round_trip && resumed,
        format!("identical run logs: {logs_equal}, bit-exact round trip: {round_trip}, resume reproduces epochs 2-3: {resumed}"),
    )
}

fn criterion_9() -> Outcome {
    let cfg = TrainConfig::default();
    let b = cfg.base_lr;
    let expected = |e: usize| match e {
        0 => 0.5 * b,
        1..=4 => b,
        5..=9 => b * 0.1,
        _ => b * 0.1 * 0.1,
    };
    let ok = (0..15).all(|e| lr_at_epoch(&cfg, e) == expected(e));
    let seq: Vec<String> = (0..15).map(|e| format!("{:.0e}", lr_at_epoch(&cfg, e))).collect();
    outcome(ok, format!("epochs 0-14: {}", seq.join(" ")))
}

/// Criteria 4 and 6 share one training run.
fn criteria_4_and_6() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let specs: Vec<DomainSpec> = DomainSpec::defaults().into_iter().take(2).collect();
    let cfg = ModelConfig::desk();
    let manifest = generate_dataset(&specs, dir.path(), 2024, cfg.feature_width()).unwrap();
    let a = datagen::load_domain(dir.path(), &manifest, 0).unwrap();
    let b = datagen::load_domain(dir.path(), &manifest, 1).unwrap();
    let tc = TrainConfig::desk();

    let mut m = Model::new(cfg).unwrap();
    m.register_domain(&a.spec.name, DomainInit::Random).unwrap();
    let start = Instant::now();
    let mut st = TrainState::new(TrainMode::Backbone, tc.clone()).unwrap();
    train(&mut m, &a.train, &mut st, &[], |_, _, r| {
        println!("    {}", r.summary());
        Ok(())
    })
    .unwrap();
    let backbone_secs = start.elapsed().as_secs_f64();
    let a_backbone = training::evaluate(&m, &a.test, SOURCE_DOMAIN).unwrap();
    let b_before = training::evaluate(&m, &b.test, SOURCE_DOMAIN).unwrap();

    let fixed: Vec<Tensor> = a.test.iter().take(100).map(|s| s.image.clone()).collect();
    let a_logits = logit_bits(&m, &fixed, SOURCE_DOMAIN);
    let d = m.register_domain(&b.spec.name, DomainInit::ZeroIdentity).unwrap();
    let start = Instant::now();
    let mut st = TrainState::new(TrainMode::Adapter(d), tc.clone()).unwrap();
    train(&mut m, &b.train, &mut st, &[], |_, _, r| {
        println!("    {}", r.summary());
        Ok(())
    })
    .unwrap();
    let adapter_secs = start.elapsed().as_secs_f64();
    let b_after = training::evaluate(&m, &b.test, d).unwrap();
    let unchanged = logit_bits(&m, &fixed, SOURCE_DOMAIN) == a_logits;
    let a_after = training::evaluate(&m, &a.test, SOURCE_DOMAIN).unwrap();

    let c4 = outcome(
        unchanged && a_after == a_backbone,
        format!(
            "{} adapter epochs on B; domain-A logits on {} fixed images bit-identical: {unchanged}; A word accuracy {} before and after",
            tc.epochs,
            fixed.len(),
            training::percent(a_after.word_accuracy)
        ),
    );
    let c6 = outcome(
        b_before.word_accuracy < 0.10 && b_after.word_accuracy >= 0.80 && unchanged,
        format!(
            "backbone on A ({} samples, {backbone_secs:.0}s): A word {}, unseen B word {} (char {}); adapters on B ({} samples, {adapter_secs:.0}s): B word {} (char {}, recall {})",
            a.train.len(),
            training::percent(a_backbone.word_accuracy),
            training::percent(b_before.word_accuracy),
            training::percent(b_before.char_accuracy),
            b.train.len(),
            training::percent(b_after.word_accuracy),
            training::percent(b_after.char_accuracy),
            training::percent(b_after.recall),
        ),
    );
    (c4, c6)
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "CTC oracle equivalence", criterion_1());
    report(2, "gradient suite", criterion_2());
    report(3, "identity at init", criterion_3());
    report(5, "parameter reduction", criterion_5());
    report(7, "metrics examples", criterion_7());
    report(8, "determinism and persistence", criterion_8());
    report(9, "learning-rate schedule", criterion_9());
    println!("criteria 4 and 6: training desk-scale backbone and adapters...");
    let (c4, c6) = criteria_4_and_6();
    report(4, "no forgetting", c4);
    report(6, "desk-scale adaptation jump", c6);

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
