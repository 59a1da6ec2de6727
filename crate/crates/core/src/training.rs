//! Training loops for the three modes, the learning-rate schedule,
//! evaluation and the two experiment protocols.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::datagen::{self, DomainData, Manifest, Sample};
use crate::domains::{DomainId, DomainInit, TrainMode, SOURCE_DOMAIN};
use crate::error::{Error, Result};
use crate::metrics::{EvalResult, MetricsAccumulator};
use crate::model::Model;
use crate::optim::{self, AdamState};

/// Learning rate for a 0-based epoch: `base * factor^floor(epoch / period)`,
/// scaled by `(epoch + 1) / warmup` during the warmup epochs.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = cfg.base_lr;
    for _ in 0..epoch / cfg.decay_period {
        lr *= cfg.decay_factor;
    }
    if epoch < cfg.warmup_epochs {
        lr *= (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    lr
}

impl TrainMode {
    /// The bank a training sample is routed through in this mode.
    pub fn route(self) -> DomainId {
        match self {
            TrainMode::Backbone => SOURCE_DOMAIN,
            TrainMode::Adapter(d) | TrainMode::Finetune(d) => d,
        }
    }
}

/// A held-out set evaluated through one domain's bank.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub domain: DomainId,
    pub samples: &'a [Sample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub name: String,
    pub domain: DomainId,
    pub metrics: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub mean_loss: f64,
    pub lr: f64,
    pub eval: Vec<DomainEval>,
    /// Seconds spent; left out of the run log so logs stay reproducible.
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(mode: TrainMode, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            mode,
            config,
            adam: AdamState::new(),
            epoch: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }
}

/// Sample order for an epoch: a Fisher–Yates shuffle seeded by
/// `(seed, epoch)`, so resuming at any epoch reproduces the same order.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(datagen::derive_seed(&[seed, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

fn name_sample(e: Error, id: u64) -> Error {
    match e {
        Error::InfeasibleLabel {
            label_len,
            repeats,
            timesteps,
            ..
        } => Error::InfeasibleLabel {
            label_len,
            repeats,
            timesteps,
            sample: Some(id),
        },
        Error::NonFinite(m) => Error::NonFinite(format!("sample {id}: {m}")),
        e => e,
    }
}

/// One step of Adam on the mean CTC loss of `batch`. Returns the batch's
/// mean loss before the update.
pub fn train_step(model: &mut Model, batch: &[&Sample], domain: DomainId, adam: &mut AdamState, lr: f64) -> Result<f64> {
    let mode = model
        .train_mode()
        .ok_or_else(|| Error::Contract("no training mode set".into()))?;
    let trainable = model.trainable_set(mode)?;
    model.store.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        total += model
            .accumulate_sample_grad(&s.image, &s.label, domain, scale)
            .map_err(|e| name_sample(e, s.id))?;
    }
    optim::adam_step(&mut model.store, adam, &trainable, lr)?;
    model.store.zero_grads();
    Ok(total * scale)
}

/// Runs epoch `state.epoch` over `data` and advances the state.
pub fn train_epoch(model: &mut Model, data: &[Sample], state: &mut TrainState, evals: &[EvalSet]) -> Result<EpochReport> {
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let start = Instant::now();
    if model.train_mode() != Some(state.mode) {
        model.set_train_mode(state.mode)?;
    }
    let cfg = &state.config;
    let epoch = state.epoch;
    let lr = lr_at_epoch(cfg, epoch);
    let domain = state.mode.route();
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut loss_sum = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
        let loss = train_step(model, &batch, domain, &mut state.adam, lr)?;
        debug!("epoch {epoch} batch {b} loss {loss:.5}");
        loss_sum += loss * batch.len() as f64;
    }
    let mean_loss = loss_sum / data.len() as f64;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite(format!("epoch {epoch} mean loss {mean_loss}")));
    }
    let eval = if cfg.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.eval_every) {
        evaluate_sets(model, evals)?
    } else {
        Vec::new()
    };
    state.epoch += 1;
    let report = EpochReport {
        epoch,
        mode: state.mode,
        seed: cfg.seed,
        mean_loss,
        lr,
        eval,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    info!("{}", report.summary());
    Ok(report)
}

impl EpochReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "[{}] epoch {} loss {:.4} lr {:.2e} ({:.1}s)",
            self.mode, self.epoch, self.mean_loss, self.lr, self.wall_secs
        );
        for e in &self.eval {
            let _ = write!(
                s,
                " | {}: char {:.2}% word {:.2}%",
                e.name,
                100.0 * e.metrics.char_accuracy,
                100.0 * e.metrics.word_accuracy
            );
        }
        s
    }
}

/// Runs the remaining epochs, calling `after_epoch` after each one (for run
/// logs and checkpoints).
pub fn train(
    model: &mut Model,
    data: &[Sample],
    state: &mut TrainState,
    evals: &[EvalSet],
    mut after_epoch: impl FnMut(&Model, &TrainState, &EpochReport) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let mut reports = Vec::new();
    while !state.finished() {
        let r = train_epoch(model, data, state, evals)?;
        after_epoch(model, state, &r)?;
        reports.push(r);
    }
    Ok(reports)
}

/// Greedy-decodes every sample through `domain` and scores the result.
pub fn evaluate(model: &Model, samples: &[Sample], domain: DomainId) -> Result<EvalResult> {
    let mut acc = MetricsAccumulator::new();
    for s in samples {
        let pred = model.decode(&s.image, domain)?;
        acc.add(&s.label, &pred);
    }
    Ok(acc.finish())
}

pub fn evaluate_sets(model: &Model, sets: &[EvalSet]) -> Result<Vec<DomainEval>> {
    sets.iter()
        .map(|e| {
            Ok(DomainEval {
                name: e.name.to_owned(),
                domain: e.domain,
                metrics: evaluate(model, e.samples, e.domain)?,
            })
        })
        .collect()
}

/// Mean CTC loss over `samples` without touching any parameter or gradient.
pub fn mean_loss(model: &Model, samples: &[Sample], domain: DomainId) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let lp = model.log_probs(&s.image, domain)?;
        total += crate::ctc::ctc_loss(&lp, &s.label).map_err(|e| name_sample(e, s.id))?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Line-delimited JSON run log: one config record, then one per epoch.
pub struct RunLog<W: Write> {
    out: W,
}

impl<W: Write> RunLog<W> {
    pub fn new(mut out: W, model: &ModelConfig, state: &TrainState) -> Result<Self> {
        let rec = serde_json::json!({
            "record": "config",
            "mode": state.mode,
            "start_epoch": state.epoch,
            "model": model,
            "train": state.config,
        });
        writeln!(out, "{rec}").map_err(|e| Error::io("run log", e))?;
        Ok(RunLog { out })
    }

    pub fn epoch(&mut self, report: &EpochReport) -> Result<()> {
        let mut rec = serde_json::to_value(report).map_err(|e| Error::Contract(e.to_string()))?;
        rec["record"] = "epoch".into();
        writeln!(self.out, "{rec}").map_err(|e| Error::io("run log", e))?;
        self.out.flush().map_err(|e| Error::io("run log", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Backbone on the first domain only.
    Exp1,
    /// Backbone on every domain jointly.
    Exp2,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(Scenario::Exp1),
            "exp2" => Ok(Scenario::Exp2),
            _ => Err(Error::Config(format!("unknown scenario {s:?} (expected exp1 or exp2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    /// What was trained, e.g. `backbone` or `adapter(mixed-glyphs)`.
    pub stage: String,
    pub dataset: String,
    pub metrics: EvalResult,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub scenario: Scenario,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rows: Vec<ProtocolRow>,
    /// Source-domain test metrics before and after all adapter runs agree
    /// exactly.
    pub source_unchanged: bool,
}

impl ProtocolReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:?}: base lr {:e}, batch {}, {} epochs per stage\n",
            self.scenario, self.base_lr, self.batch_size, self.epochs
        );
        s.push_str(&format_table(
            &["Training", "Evaluation Dataset", "Character Accuracy", "Word Accuracy", "Recall", "Trainable Params"],
            &self
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.stage.clone(),
                        r.dataset.clone(),
                        percent(r.metrics.char_accuracy),
                        percent(r.metrics.word_accuracy),
                        percent(r.metrics.recall),
                        r.trainable_params.to_string(),
                    ]
                })
                .collect::<Vec<_>>(),
        ));
        let _ = writeln!(s, "source domain unchanged by adapters: {}", self.source_unchanged);
        s
    }
}

pub fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Left-aligned plain-text table.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut l = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ");
        l.truncate(l.trim_end().len());
        l + "\n"
    };
    let mut s = line(header.to_vec());
    s += &line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        s += &line(r.iter().map(String::as_str).collect());
    }
    s
}

fn train_stage(model: &mut Model, mode: TrainMode, data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    model.set_train_mode(mode)?;
    let mut state = TrainState::new(mode, cfg.clone())?;
    info!("training {mode} on {} samples for {} epochs", data.len(), cfg.epochs);
    train(model, data, &mut state, &[], |_, _, _| Ok(()))?;
    Ok(())
}

/// Runs one experiment end to end on a generated dataset. Domain 0 of the
/// dataset is the source; every other domain is adapted to in turn with
/// adapters (sharing one model) and, separately, by finetuning a copy of the
/// backbone.
pub fn run_protocol(scenario: Scenario, data_dir: &Path, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<ProtocolReport> {
    let manifest = Manifest::load(data_dir)?;
    if manifest.domains.is_empty() {
        return Err(Error::Config("dataset has no domains".into()));
    }
    let data: Vec<DomainData> = (0..manifest.domains.len())
        .map(|i| datagen::load_domain(data_dir, &manifest, i))
        .collect::<Result<_>>()?;

    let mut backbone = Model::new(model_cfg.clone())?;
    backbone.register_domain(&data[0].spec.name, DomainInit::Random)?;
    let backbone_train: Vec<Sample> = match scenario {
        Scenario::Exp1 => data[0].train.clone(),
        Scenario::Exp2 => data.iter().flat_map(|d| d.train.iter().cloned()).collect(),
    };
    train_stage(&mut backbone, TrainMode::Backbone, &backbone_train, train_cfg)?;

    let mut rows = Vec::new();
    let backbone_params = backbone.count_trainable_params(TrainMode::Backbone)?;
    for d in &data {
        rows.push(ProtocolRow {
            stage: "backbone".into(),
            dataset: d.spec.name.clone(),
            metrics: evaluate(&backbone, &d.test, SOURCE_DOMAIN)?,
            trainable_params: backbone_params,
        });
    }
    let source_before = rows[0].metrics;

    let mut adapted = backbone.clone();
    for d in &data[1..] {
        let id = adapted.register_domain(&d.spec.name, DomainInit::ZeroIdentity)?;
        let mode = TrainMode::Adapter(id);
        train_stage(&mut adapted, mode, &d.train, train_cfg)?;
        rows.push(ProtocolRow {
            stage: format!("adapter({})", d.spec.name),
            dataset: d.spec.name.clone(),
            metrics: evaluate(&adapted, &d.test, id)?,
            trainable_params: adapted.count_trainable_params(mode)?,
        });
    }
    let source_after = evaluate(&adapted, &data[0].test, SOURCE_DOMAIN)?;
    rows.push(ProtocolRow {
        stage: "after adapters".into(),
        dataset: data[0].spec.name.clone(),
        metrics: source_after,
        trainable_params: 0,
    });

    for d in &data[1..] {
        let mut tuned = backbone.clone();
        let id = tuned.register_domain(&d.spec.name, DomainInit::ZeroIdentity)?;
        let mode = TrainMode::Finetune(id);
        train_stage(&mut tuned, mode, &d.train, train_cfg)?;
        rows.push(ProtocolRow {
            stage: format!("finetune({})", d.spec.name),
            dataset: d.spec.name.clone(),
            metrics: evaluate(&tuned, &d.test, id)?,
            trainable_params: tuned.count_trainable_params(mode)?,
        });
        rows.push(ProtocolRow {
            stage: format!("finetune({})", d.spec.name),
            dataset: data[0].spec.name.clone(),
            metrics: evaluate(&tuned, &data[0].test, SOURCE_DOMAIN)?,
            trainable_params: tuned.count_trainable_params(mode)?,
        });
    }

    Ok(ProtocolReport {
        scenario,
        base_lr: train_cfg.base_lr,
        batch_size: train_cfg.batch_size,
        epochs: train_cfg.epochs,
        rows,
        source_unchanged: source_before == source_after,
    })
}
