use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_adoc");

fn desk_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path) -> Output {
    let conf = desk_conf();
    run(&[
        "gen-data",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "5",
        "--train-count",
        "6",
        "--test-count",
        "3",
    ])
}

/// Dataset plus a one-epoch backbone checkpoint.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    assert_eq!(code(&gen(&data)), 0);
    let ck = dir.join("backbone.ck");
    let conf = desk_conf();
    let o = run(&[
        "train-backbone",
        "--config",
        conf.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--epochs",
        "3",
        "--batch",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (data, ck)
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(code(&run(&["gen-data"])), 2);
    assert_eq!(code(&run(&["eval", "--data", "x", "--checkpoint", "y"])), 2);
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "d_model = 16\nwidgets = 3\n").unwrap();
    let o = run(&["count-params", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("widgets"));
}

#[test]
fn regenerating_reports_identical_checksums() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(dir.path())), 0);
    let again = gen(dir.path());
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("checksums identical"));
}

#[test]
fn count_params_reports_adapter_share() {
    let o = run(&["--json", "count-params"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let modes = v["modes"].as_array().unwrap();
    let adapter = modes.iter().find(|m| m["mode"] == "adapter(1)").unwrap();
    let share = adapter["percent_of_finetune"].as_f64().unwrap();
    assert!(share > 0.0 && share < 10.0, "{share}");
}

#[test]
fn train_adapt_eval_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    let (data_s, ck_s) = (data.to_str().unwrap(), ck.to_str().unwrap());
    assert!(dir.path().join("backbone.ck.runlog.jsonl").exists());

    let unknown = run(&["eval", "--data", data_s, "--checkpoint", ck_s, "--domain", "nowhere"]);
    assert_eq!(code(&unknown), 1);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("clean-digits"));

    let adapted = dir.path().join("adapted.ck");
    let conf = desk_conf();
    let o = run(&[
        "train-adapter",
        "--config",
        conf.to_str().unwrap(),
        "--data",
        data_s,
        "--checkpoint",
        ck_s,
        "--out",
        adapted.to_str().unwrap(),
        "--domain",
        "noisy-inverse",
        "--epochs",
        "3",
        "--batch",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("trainable parameters"));

    let ad = adapted.to_str().unwrap();
    let table = run(&["eval", "--data", data_s, "--checkpoint", ad, "--all-domains"]);
    let json = run(&["--json", "eval", "--data", data_s, "--checkpoint", ad, "--all-domains"]);
    assert_eq!((code(&table), code(&json)), (0, 0));
    let text = stdout(&table);
    assert!(text.starts_with("Evaluation Dataset | Character Accuracy | Word Accuracy | Recall | Trainable Params"));
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(rows.len(), 2);
    let body: Vec<&str> = text.lines().skip(2).collect();
    for (line, row) in body.iter().zip(&rows) {
        let cells: Vec<&str> = line.split(" | ").map(str::trim).collect();
        assert_eq!(cells[0], row["dataset"].as_str().unwrap());
        assert_eq!(cells[4], row["trainable_params"].to_string());
        let word = row["metrics"]["word_accuracy"].as_f64().unwrap();
        assert_eq!(cells[2], format!("{:.2}%", 100.0 * word));
    }

    let decoded = run(&[
        "decode",
        "--checkpoint",
        ad,
        "--samples",
        data.join("noisy-inverse.test.bin").to_str().unwrap(),
        "--domain",
        "noisy-inverse",
    ]);
    assert_eq!(code(&decoded), 0);
    assert_eq!(stdout(&decoded).lines().count(), 3);
    assert_eq!(code(&run(&["decode", "--checkpoint", ad, "--samples", "x.bin", "--domain", "7"])), 1);
}

#[test]
fn adapter_training_without_a_domain_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = trained(dir.path());
    let o = run(&["train-adapter", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
