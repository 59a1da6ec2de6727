use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use adoc_core::datagen::{self, DomainData, DomainSpec, Manifest, Sample};
use adoc_core::persist::{load_checkpoint, save_checkpoint};
use adoc_core::training::{self, format_table, percent, run_protocol, EvalSet, RunLog, Scenario, TrainState};
use adoc_core::{DomainId, DomainInit, Error, EvalResult, KeyValues, Model, ModelConfig, TrainConfig, TrainMode, SOURCE_DOMAIN};
use log::{info, warn};
use serde::Serialize;

use crate::args::{Cli, CountArgs, DecodeArgs, EvalArgs, GenDataArgs, Overrides, ProtocolArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values (exit 2).
    Usage(String),
    /// Anything that went wrong while doing the work (exit 1).
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

pub type CliResult = std::result::Result<(), CliError>;

/// Defaults, then the config file, then flags.
fn settings(cli: &Cli, overrides: Option<&Overrides>) -> Result<(ModelConfig, TrainConfig), CliError> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let kv = KeyValues::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?;
        let rest = model.apply(&kv).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut train_kv = KeyValues::default();
        for k in &rest {
            train_kv.set(k.as_str(), kv.get(k).unwrap_or_default());
        }
        let unknown = train.apply(&train_kv).map_err(|e| CliError::Usage(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))));
        }
    }
    if let Some(o) = overrides {
        if let Some(v) = o.seed {
            train.seed = v;
        }
        if let Some(v) = o.epochs {
            train.epochs = v;
        }
        if let Some(v) = o.lr {
            train.base_lr = v;
        }
        if let Some(v) = o.batch {
            train.batch_size = v;
        }
    }
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((model, train))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn describe_dataset(manifest: &Manifest) -> String {
    manifest
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| format!("{i}={}", d.spec.name))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Resolves a dataset domain given by index or name.
fn dataset_domain(manifest: &Manifest, key: &str, model: Option<&Model>) -> Result<usize, CliError> {
    let found = match key.parse::<usize>() {
        Ok(i) if i < manifest.domains.len() => Some(i),
        Ok(_) => None,
        Err(_) => manifest.domain_index(key),
    };
    found.ok_or_else(|| {
        let registered = model.map(|m| m.registry.describe()).unwrap_or_else(|| "none".into());
        CliError::Run(Error::Routing(format!(
            "unknown domain {key:?}; dataset domains: {}; registered banks: {registered}",
            describe_dataset(manifest)
        )))
    })
}

fn registered_domain(model: &Model, key: &str) -> Result<DomainId, CliError> {
    let by_id = key.parse::<u32>().ok().map(DomainId).filter(|d| model.registry.get(*d).is_ok());
    by_id.or_else(|| model.registry.by_name(key).map(|d| d.id)).ok_or_else(|| {
        CliError::Run(Error::Routing(format!(
            "domain {key:?} is not registered (registered: {})",
            model.registry.describe()
        )))
    })
}

pub fn gen_data(cli: &Cli, args: &GenDataArgs) -> CliResult {
    let (model_cfg, _) = settings(cli, None)?;
    let specs: Vec<DomainSpec> = DomainSpec::defaults()
        .into_iter()
        .map(|mut s| {
            s.train_count = args.train_count.unwrap_or(s.train_count);
            s.test_count = args.test_count.unwrap_or(s.test_count);
            s
        })
        .collect();
    let previous = Manifest::load(&args.out).ok();
    let manifest = datagen::generate_dataset(&specs, &args.out, args.seed, model_cfg.feature_width())?;
    if cli.json {
        print_json(&serde_json::json!({
            "out": args.out,
            "master_seed": manifest.master_seed,
            "timesteps": manifest.timesteps,
            "domains": manifest.domains.iter().map(|d| serde_json::json!({
                "name": d.spec.name,
                "alphabet": d.spec.alphabet,
                "train": d.spec.train_count,
                "test": d.spec.test_count,
                "train_sha256": d.train_sha256,
                "test_sha256": d.test_sha256,
            })).collect::<Vec<_>>(),
        }));
    } else {
        println!("wrote {} domains to {} (seed {})", manifest.domains.len(), args.out.display(), args.seed);
        let rows: Vec<Vec<String>> = manifest
            .domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                vec![
                    i.to_string(),
                    d.spec.name.clone(),
                    d.spec.alphabet.clone(),
                    d.spec.train_count.to_string(),
                    d.spec.test_count.to_string(),
                    d.train_sha256[..12].to_owned(),
                ]
            })
            .collect();
        print!("{}", format_table(&["Id", "Domain", "Alphabet", "Train", "Test", "Train SHA-256"], &rows));
    }
    if let Some(prev) = previous {
        let same = prev.domains.len() == manifest.domains.len()
            && prev
                .domains
                .iter()
                .zip(&manifest.domains)
                .all(|(a, b)| a.train_sha256 == b.train_sha256 && a.test_sha256 == b.test_sha256);
        let note = if same {
            "checksums identical to the previous dataset in this directory"
        } else {
            "checksums differ from the previous dataset in this directory"
        };
        if cli.json {
            eprintln!("{note}");
        } else {
            println!("{note}");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Backbone,
    Adapter,
    Finetune,
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".runlog.jsonl");
    PathBuf::from(s)
}

pub fn train_cmd(cli: &Cli, args: &TrainArgs, kind: Kind) -> CliResult {
    let (model_cfg, train_cfg) = settings(cli, Some(&args.overrides))?;
    let manifest = Manifest::load(&args.data)?;
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.clone());

    let (mut model, indices, mode, resumed) = match kind {
        Kind::Backbone if !args.resume => {
            let keys = args.domain.as_deref().unwrap_or("0");
            let indices = keys
                .split(',')
                .map(|k| dataset_domain(&manifest, k.trim(), None))
                .collect::<Result<Vec<_>, _>>()?;
            if manifest.timesteps != model_cfg.feature_width() {
                return Err(CliError::Usage(format!(
                    "dataset was generated for {} output steps, this model produces {}; regenerate with the same --config",
                    manifest.timesteps,
                    model_cfg.feature_width()
                )));
            }
            let mut model = Model::new(model_cfg)?;
            model.register_domain(&manifest.domains[indices[0]].spec.name, DomainInit::Random)?;
            (model, indices, TrainMode::Backbone, None)
        }
        Kind::Backbone => {
            let ck = load_checkpoint(&args.checkpoint)?;
            let state = ck
                .train
                .filter(|s| s.mode == TrainMode::Backbone)
                .ok_or_else(|| CliError::Run(Error::Contract("checkpoint holds no backbone training state to resume".into())))?;
            let keys = args.domain.as_deref().unwrap_or("0");
            let indices = keys
                .split(',')
                .map(|k| dataset_domain(&manifest, k.trim(), Some(&ck.model)))
                .collect::<Result<Vec<_>, _>>()?;
            (ck.model, indices, TrainMode::Backbone, Some(state))
        }
        Kind::Adapter | Kind::Finetune => {
            let key = args
                .domain
                .as_deref()
                .ok_or_else(|| CliError::Usage("--domain is required".into()))?;
            let ck = load_checkpoint(&args.checkpoint)?;
            let mut model = ck.model;
            let index = dataset_domain(&manifest, key, Some(&model))?;
            let name = &manifest.domains[index].spec.name;
            let bank = match model.registry.by_name(name) {
                Some(d) => d.id,
                None => {
                    let id = model.register_domain(name, DomainInit::ZeroIdentity)?;
                    println!("registered domain {id} ({name})");
                    id
                }
            };
            let mode = if kind == Kind::Adapter { TrainMode::Adapter(bank) } else { TrainMode::Finetune(bank) };
            let resumed = if args.resume {
                Some(ck.train.filter(|s| s.mode == mode).ok_or_else(|| {
                    CliError::Run(Error::Contract(format!("checkpoint holds no {mode} training state to resume")))
                })?)
            } else {
                None
            };
            (model, vec![index], mode, resumed)
        }
    };

    let is_resume = resumed.is_some();
    let mut state = match resumed {
        Some(s) => {
            if args.overrides.epochs.is_some() || args.overrides.lr.is_some() || args.overrides.batch.is_some() || args.overrides.seed.is_some() {
                warn!("resuming uses the checkpoint's training settings; schedule flags are ignored");
            }
            s
        }
        None => TrainState::new(mode, train_cfg)?,
    };
    model.set_train_mode(mode)?;

    let data: Vec<DomainData> = indices
        .iter()
        .map(|&i| datagen::load_domain(&args.data, &manifest, i))
        .collect::<adoc_core::Result<_>>()?;
    let train_set: Vec<Sample> = data.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let route = mode.route();
    let evals: Vec<EvalSet> = data
        .iter()
        .map(|d| EvalSet {
            name: &d.spec.name,
            domain: route,
            samples: &d.test,
        })
        .collect();

    let trainable = model.count_trainable_params(mode)?;
    let finetune = model.count_trainable_params(TrainMode::Finetune(route))?;
    println!(
        "{mode}: {trainable} trainable parameters ({:.2}% of the {finetune} a finetune of this domain trains)",
        100.0 * trainable as f64 / finetune as f64
    );
    println!(
        "training on {} samples from {}, epochs {}..{}",
        train_set.len(),
        data.iter().map(|d| d.spec.name.as_str()).collect::<Vec<_>>().join("+"),
        state.epoch,
        state.config.epochs
    );

    let log_path = args.log.clone().unwrap_or_else(|| default_log(&out));
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(is_resume)
        .truncate(!is_resume)
        .open(&log_path)
        .map_err(|e| CliError::Run(Error::Io { path: log_path.clone(), source: e }))?;
    let mut log = RunLog::new(std::io::BufWriter::new(file), &model.config, &state)?;
    training::train(&mut model, &train_set, &mut state, &evals, |m, s, r| {
        println!("{}", r.summary());
        log.epoch(r)?;
        save_checkpoint(m, Some(s), &out)
    })?;
    if state.config.epochs == 0 {
        save_checkpoint(&model, Some(&state), &out)?;
    }
    info!("run log written to {}", log_path.display());
    println!("saved {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    dataset: String,
    bank: DomainId,
    bank_name: String,
    adapted: bool,
    metrics: EvalResult,
    trainable_params: usize,
}

impl EvalRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            percent(self.metrics.char_accuracy),
            percent(self.metrics.word_accuracy),
            percent(self.metrics.recall),
            self.trainable_params.to_string(),
        ]
    }
}

pub const EVAL_COLUMNS: [&str; 5] = ["Evaluation Dataset", "Character Accuracy", "Word Accuracy", "Recall", "Trainable Params"];

pub fn eval_cmd(cli: &Cli, args: &EvalArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?.model;
    let manifest = Manifest::load(&args.data)?;
    let targets: Vec<(usize, DomainId, bool)> = if args.all_domains {
        model
            .registry
            .iter()
            .map(|bank| {
                manifest.domain_index(&bank.name).map(|i| (i, bank.id, true)).ok_or_else(|| {
                    CliError::Run(Error::Routing(format!(
                        "checkpoint domain {} ({}) has no data in {} (dataset domains: {})",
                        bank.id,
                        bank.name,
                        args.data.display(),
                        describe_dataset(&manifest)
                    )))
                })
            })
            .collect::<Result<_, _>>()?
    } else {
        let key = args.domain.as_deref().expect("clap requires --domain or --all-domains");
        let i = dataset_domain(&manifest, key, Some(&model))?;
        match model.registry.by_name(&manifest.domains[i].spec.name) {
            Some(bank) => vec![(i, bank.id, true)],
            None => {
                eprintln!("domain {} has no bank in this checkpoint; evaluating through the source bank", manifest.domains[i].spec.name);
                vec![(i, SOURCE_DOMAIN, false)]
            }
        }
    };
    let mut rows = Vec::new();
    for (i, bank, adapted) in targets {
        let data = datagen::load_domain(&args.data, &manifest, i)?;
        let mode = if bank == SOURCE_DOMAIN { TrainMode::Backbone } else { TrainMode::Adapter(bank) };
        rows.push(EvalRow {
            dataset: data.spec.name.clone(),
            bank,
            bank_name: model.registry.get(bank)?.name.clone(),
            adapted,
            metrics: training::evaluate(&model, &data.test, bank)?,
            trainable_params: model.count_trainable_params(mode)?,
        });
    }
    if cli.json {
        print_json(&rows);
    } else {
        print!("{}", format_table(&EVAL_COLUMNS, &rows.iter().map(EvalRow::cells).collect::<Vec<_>>()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CountRow {
    mode: String,
    trainable: usize,
    percent_of_finetune: f64,
}

pub fn count_cmd(cli: &Cli, args: &CountArgs) -> CliResult {
    let model = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            let (cfg, _) = settings(cli, None)?;
            let mut m = Model::new(cfg)?;
            m.register_domain("source", DomainInit::Random)?;
            m.register_domain("target", DomainInit::ZeroIdentity)?;
            m
        }
    };
    let mut rows = Vec::new();
    let total = model.param_count();
    let first_target = model.registry.ids().find(|&d| d != SOURCE_DOMAIN).unwrap_or(SOURCE_DOMAIN);
    let reference = model.count_trainable_params(TrainMode::Finetune(first_target))?;
    let mut push = |mode: TrainMode, reference: usize| -> adoc_core::Result<()> {
        let n = model.count_trainable_params(mode)?;
        rows.push(CountRow {
            mode: mode.to_string(),
            trainable: n,
            percent_of_finetune: 100.0 * n as f64 / reference as f64,
        });
        Ok(())
    };
    push(TrainMode::Backbone, reference)?;
    for d in model.registry.ids() {
        let finetune = model.count_trainable_params(TrainMode::Finetune(d))?;
        push(TrainMode::Adapter(d), finetune)?;
        push(TrainMode::Finetune(d), finetune)?;
    }
    if cli.json {
        print_json(&serde_json::json!({ "total": total, "domains": model.registry.describe(), "modes": rows }));
    } else {
        println!("total parameters: {total} (domains: {})", model.registry.describe());
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.mode.clone(), r.trainable.to_string(), format!("{:.2}%", r.percent_of_finetune)])
            .collect();
        print!("{}", format_table(&["Mode", "Trainable Params", "Share of Finetune"], &cells));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Decoded {
    id: u64,
    prediction: String,
    truth: String,
}

pub fn decode_cmd(cli: &Cli, args: &DecodeArgs) -> CliResult {
    let model = load_checkpoint(&args.checkpoint)?.model;
    let domain = registered_domain(&model, &args.domain)?;
    let samples = datagen::read_samples(&args.samples)?;
    let limit = args.limit.unwrap_or(samples.len());
    let mut out = Vec::new();
    for s in samples.iter().take(limit) {
        let pred = model.decode(&s.image, domain)?;
        out.push(Decoded {
            id: s.id,
            prediction: datagen::label_to_string(&pred),
            truth: datagen::label_to_string(&s.label),
        });
    }
    if cli.json {
        print_json(&out);
    } else {
        for d in &out {
            println!("{}\t{}\t{}", d.id, d.prediction, d.truth);
        }
    }
    Ok(())
}

pub fn protocol_cmd(cli: &Cli, args: &ProtocolArgs) -> CliResult {
    let (model_cfg, train_cfg) = settings(cli, Some(&args.overrides))?;
    let scenario: Scenario = args.scenario.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let report = run_protocol(scenario, &args.data, &model_cfg, &train_cfg)?;
    if cli.json {
        print_json(&report);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}
