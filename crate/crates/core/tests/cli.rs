use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use warmstart::cli::{emit_results, ABORT_FILE};
use warmstart::diagnostics::{assemble_curves, SeedTag};
use warmstart::harness::ExperimentRecord;
use warmstart::output::{self, CURVES_HEADER};

fn warmstart(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_warmstart"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("WARMSTART_THREADS", t),
        None => cmd.env_remove("WARMSTART_THREADS"),
    };
    cmd.output().expect("binary runs")
}

const TINY_ONLINE: &str = r#"{
  "protocol": "online",
  "dataset": {"kind": "gaussian_mixture", "n": 240, "d": 5, "k": 3, "label_noise": 0.1, "seed": 2},
  "model": {"hidden": [8]},
  "optimizer": {"kind": "adam", "learning_rate": 0.01, "batch_size": 32},
  "convergence": {"max_epochs": 15, "patience": 2},
  "online": {"k_stream": 40, "rounds": 3},
  "seeds": [0, 1]
}"#;

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn tiny_online_run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_ONLINE);
    let out_dir = dir.path().join("results");
    let out = warmstart(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let curves = fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    let mut lines = curves.lines();
    let hash_line = lines.next().unwrap();
    assert!(hash_line.starts_with("# config_hash: "));
    assert_eq!(lines.next().unwrap(), CURVES_HEADER);
    assert!(lines.count() > 0);

    let records: Vec<ExperimentRecord> =
        serde_json::from_str(&fs::read_to_string(out_dir.join("records.json")).unwrap()).unwrap();
    assert_eq!(records.len(), 2 * 3);
    let hash = hash_line.trim_start_matches("# config_hash: ");
    assert!(records.iter().all(|r| r.config_hash == hash));
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with(hash_line));
}

#[test]
fn broken_config_exits_1_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"protocol": "online", "reinit": {"lamda": 0.5}}"#);
    let out_dir = dir.path().join("results");
    let out = warmstart(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown key 'lamda' (did you mean 'lambda'?)"), "{}", stderr(&out));
    assert!(!out_dir.exists());

    let missing = warmstart(&["run", "--config", "/nonexistent/config.json"], None);
    assert_eq!(missing.status.code(), Some(1));

    let config = write_config(dir.path(), r#"{"protocol": "online", "val_fraction": "a third"}"#);
    let mistyped = warmstart(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(mistyped.status.code(), Some(1));
    assert!(stderr(&mistyped).contains("val_fraction"), "{}", stderr(&mistyped));
    assert!(!out_dir.exists());
}

#[test]
fn divergent_learning_rate_exits_2_and_flushes_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
  "protocol": "online",
  "dataset": {"kind": "gaussian_mixture", "n": 240, "d": 5, "k": 3, "label_noise": 0.1, "seed": 2},
  "model": {"hidden": [16, 16], "activation": "none"},
  "optimizer": {"kind": "sgd", "learning_rate": 1000.0, "batch_size": 32},
  "convergence": {"max_epochs": 20},
  "online": {"k_stream": 40, "rounds": 3},
  "seeds": [0]
}"#,
    );
    let out_dir = dir.path().join("results");
    let out = warmstart(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("at epoch"));
    let abort: Value = serde_json::from_str(&fs::read_to_string(out_dir.join(ABORT_FILE)).unwrap()).unwrap();
    assert!(abort["epoch"].as_u64().unwrap() >= 1);
    assert_eq!(abort["protocol"], "online");
    let records: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("records.json")).unwrap()).unwrap();
    assert!(records.is_array());
    assert!(out_dir.join("curves.csv").exists());
}

#[test]
fn overrides_seeds_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY_ONLINE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path, threads: &str| {
        warmstart(
            &[
                "run",
                "--config",
                &config,
                "--seed",
                "4",
                "--seed",
                "5",
                "--set",
                "reinit.lambda=0.3",
                "--out",
                out.to_str().unwrap(),
            ],
            Some(threads),
        )
    };
    assert_eq!(run(&a, "1").status.code(), Some(0));
    assert_eq!(run(&b, "2").status.code(), Some(0));
    let curves_a = fs::read(a.join("curves.csv")).unwrap();
    assert_eq!(curves_a, fs::read(b.join("curves.csv")).unwrap());
    assert_eq!(fs::read(a.join("summary.csv")).unwrap(), fs::read(b.join("summary.csv")).unwrap());

    let records: Vec<ExperimentRecord> =
        serde_json::from_str(&fs::read_to_string(a.join("records.json")).unwrap()).unwrap();
    let seeds: std::collections::BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec![4, 5]);
    assert_eq!(records[0].config["reinit"]["lambda"], 0.3);

    let bad = warmstart(&["run", "--config", &config, "--out", a.to_str().unwrap()], Some("zero"));
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn csv_dataset_with_header_flag() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("x1,x2,label\n");
    for i in 0..90 {
        let c = i % 3;
        body.push_str(&format!("{},{},{c}\n", c as f64 + 0.01 * i as f64, -(c as f64)));
    }
    fs::write(dir.path().join("data.csv"), body).unwrap();
    let config = write_config(
        dir.path(),
        r#"{
  "protocol": "iterative_sp",
  "dataset": {"csv": "data.csv"},
  "model": {"hidden": [4]},
  "optimizer": {"kind": "adam", "learning_rate": 0.05, "batch_size": 16},
  "convergence": {"max_epochs": 10, "patience": 2},
  "iterative": {"rounds": 2},
  "seeds": [0]
}"#,
    );
    let out_dir = dir.path().join("out");
    let without = warmstart(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(without.status.code(), Some(1), "header line should not parse as data");
    assert!(stderr(&without).contains(":1:"), "{}", stderr(&without));
    let with = warmstart(&["run", "--config", &config, "--header", "--out", out_dir.to_str().unwrap()], None);
    assert_eq!(with.status.code(), Some(0), "{}", stderr(&with));
}

#[test]
fn verify_subcommand_passes() {
    let out = warmstart(&["verify"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn empty_records_give_headers_and_empty_array() {
    let dir = tempfile::tempdir().unwrap();
    emit_results(&[], dir.path(), "00ff").unwrap();
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("records.json")).unwrap()).unwrap();
    assert_eq!(json, Value::Array(vec![]));
    let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves, format!("# config_hash: 00ff\n{CURVES_HEADER}\n"));
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap().lines().count(), 2);

    let file = dir.path().join("records.json");
    assert!(emit_results(&[], &file, "00ff").is_err(), "a file is not a directory");
}

fn tiny_records() -> (Vec<ExperimentRecord>, String) {
    let cfg = warmstart::config::parse_config_str(TINY_ONLINE, &[]).unwrap();
    let data = warmstart::cli::load_data(&cfg).unwrap();
    (warmstart::cli::execute(&cfg, &data).unwrap(), cfg.hash())
}

#[test]
fn records_json_round_trips() {
    let (records, _) = tiny_records();
    let text = output::records_json(&records).unwrap();
    let back: Vec<ExperimentRecord> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, records);
}

#[test]
fn summary_means_match_curve_aggregates() {
    let (records, hash) = tiny_records();
    let curves = assemble_curves(&records).unwrap();
    let summary = output::summary_csv(&records, &hash);
    let mut checked = 0;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(summary.as_bytes());
    for row in reader.records() {
        let cols = row.unwrap();
        let line = cols.iter().collect::<Vec<_>>().join("|");
        let (series, x, metric, n, mean, std) = (&cols[1], &cols[2], &cols[3], &cols[4], &cols[5], &cols[6]);
        let x: f64 = x.parse().unwrap();
        let n: usize = n.parse().unwrap();
        let find = |tag: SeedTag| {
            curves
                .iter()
                .find(|p| p.series == series && p.x == x && p.metric == metric && p.seed == tag)
                .map(|p| p.value)
        };
        if n < 2 {
            continue;
        }
        let Some(agg_mean) = find(SeedTag::Mean) else { continue };
        assert!((agg_mean - mean.parse::<f64>().unwrap()).abs() <= 1e-12, "{line}");
        assert!((find(SeedTag::Std).unwrap() - std.parse::<f64>().unwrap()).abs() <= 1e-12, "{line}");
        checked += 1;
    }
    assert!(checked >= 7, "only {checked} rows compared");
}
