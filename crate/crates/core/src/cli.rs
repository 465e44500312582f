//! Command-line front end. This is where files are read and written.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{self, DatasetSource, Protocol, RunConfig};
use crate::data::{self, Dataset};
use crate::harness::{self, ExperimentRecord, HarnessError, ProtocolData};
use crate::output;
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "WARMSTART_THREADS";

/// Name of the file describing an aborted run.
pub const ABORT_FILE: &str = "abort.json";

#[derive(Debug, Parser)]
#[command(name = "warmstart", version, about = "Warm-start and shrink-perturb training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a JSON config.
    Run(RunArgs),
    /// Check core invariants on tiny instances.
    Verify,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Seeds to run; replaces the config's list. Repeatable.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory; replaces the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. `--set reinit.lambda=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// The dataset CSV starts with a header line.
    #[arg(long)]
    pub header: bool,
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run(args) => run(&args),
        Command::Verify => run_verify(),
    }
}

fn run_verify() -> i32 {
    let mut failed = 0;
    for (name, result) in verify::run_checks() {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failed == 0 {
        EXIT_OK
    } else {
        eprintln!("{failed} check(s) failed");
        EXIT_RUNTIME
    }
}

/// Read, merge and validate the config named by `args`.
pub fn load_config(args: &RunArgs) -> Result<RunConfig, String> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read config {}: {e}", args.config.display()))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| format!("{}: malformed JSON: {e}", args.config.display()))?;

    let mut overrides = Vec::new();
    for raw in &args.overrides {
        overrides.push(config::parse_override(raw).map_err(|e| e.to_string())?);
    }
    if !args.seeds.is_empty() {
        overrides.push(("seeds".into(), json!(args.seeds)));
    }
    if let Some(out) = &args.out {
        overrides.push(("out".into(), json!(out)));
    }
    if args.header {
        overrides.push(("dataset.header".into(), Value::Bool(true)));
    }
    // Relative dataset paths are taken relative to the config file.
    let base = args.config.parent().unwrap_or(Path::new(""));
    for key in ["dataset", "pretrain"] {
        let node = if key == "dataset" {
            doc.get_mut("dataset")
        } else {
            doc.get_mut("pretrain").and_then(|p| p.get_mut("source"))
        };
        if let Some(Value::String(p)) = node.and_then(|d| d.get_mut("csv")) {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
    }
    config::parse_config_value(doc, &overrides).map_err(|e| format!("{}: {e}", args.config.display()))
}

pub fn load_source(source: &DatasetSource) -> crate::error::Result<Dataset> {
    match source {
        DatasetSource::Csv { csv, header } => data::load_csv(csv, *header),
        DatasetSource::Synthetic(spec) => data::gen_synthetic(spec),
    }
}

pub fn load_data(cfg: &RunConfig) -> crate::error::Result<ProtocolData> {
    let main = load_source(&cfg.dataset)?;
    let source = match cfg.protocol {
        Protocol::PretrainCrossover => cfg.pretrain_source().map(|s| load_source(&s)).transpose()?,
        _ => None,
    };
    Ok(ProtocolData { main, source })
}

/// Worker count from the environment; `None` means the rayon default.
pub fn thread_cap() -> Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
        },
    }
}

/// Run every (seed, grid cell) job, in parallel, and collect the results
/// in job order.
pub fn execute(cfg: &RunConfig, data: &ProtocolData) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let jobs: Vec<(Option<usize>, u64)> = match cfg.protocol {
        Protocol::Grid => {
            let cells = harness::grid_cells(cfg).len();
            (0..cells)
                .flat_map(|c| cfg.seeds.iter().map(move |&s| (Some(c), s)))
                .collect()
        }
        _ => cfg.seeds.iter().map(|&s| (None, s)).collect(),
    };
    let cells = harness::grid_cells(cfg);
    let results: Vec<Result<Vec<ExperimentRecord>, HarnessError>> = jobs
        .par_iter()
        .map(|&(cell, seed)| match cell {
            Some(c) => harness::run_grid_cell(cfg, &cells[c], &data.main, seed),
            None => harness::run_protocol(cfg, data, seed),
        })
        .collect();

    let mut records = Vec::new();
    let mut failure = None;
    for result in results {
        match result {
            Ok(r) => records.extend(r),
            Err(HarnessError::Diverged {
                protocol,
                seed,
                epoch,
                param_norm,
                partial,
            }) if failure.is_none() => {
                failure = Some((protocol, seed, epoch, param_norm));
                records.extend(partial);
            }
            Err(HarnessError::Diverged { partial, .. }) => records.extend(partial),
            Err(e) => return Err(e),
        }
    }
    output::sort_records(&mut records);
    match failure {
        None => Ok(records),
        Some((protocol, seed, epoch, param_norm)) => Err(HarnessError::Diverged {
            protocol,
            seed,
            epoch,
            param_norm,
            partial: records,
        }),
    }
}

/// Write the three result files.
pub fn emit_results(records: &[ExperimentRecord], out: &Path, config_hash: &str) -> Result<(), String> {
    let files = [
        (output::RECORDS_FILE, output::records_json(records).map_err(|e| e.to_string())?),
        (output::CURVES_FILE, output::curves_csv(records, config_hash).map_err(|e| e.to_string())?),
        (output::SUMMARY_FILE, output::summary_csv(records, config_hash)),
    ];
    fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    for (name, body) in files {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    Ok(())
}

fn run(args: &RunArgs) -> i32 {
    let cfg = match load_config(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let data = match load_data(&cfg) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let threads = match thread_cap() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_RUNTIME;
        }
    };

    let hash = cfg.hash();
    match pool.install(|| execute(&cfg, &data)) {
        Ok(records) => match emit_results(&records, &cfg.out, &hash) {
            Ok(()) => {
                eprintln!("wrote {} record(s) to {}", records.len(), cfg.out.display());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_RUNTIME
            }
        },
        Err(HarnessError::Config(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(HarnessError::Diverged {
            protocol,
            seed,
            epoch,
            param_norm,
            partial,
        }) => {
            let message = format!(
                "training diverged in {protocol} (seed {seed}) at epoch {epoch}: non-finite loss, parameter norm {param_norm}"
            );
            eprintln!("error: {message}");
            let abort = json!({
                "config_hash": hash,
                "protocol": protocol,
                "seed": seed,
                "epoch": epoch,
                "param_norm": if param_norm.is_finite() { json!(param_norm) } else { json!(param_norm.to_string()) },
                "message": message,
            });
            let written = emit_results(&partial, &cfg.out, &hash).and_then(|()| {
                let path = cfg.out.join(ABORT_FILE);
                let body = serde_json::to_string_pretty(&abort).expect("abort record serializes") + "\n";
                fs::write(&path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))
            });
            if let Err(e) = written {
                eprintln!("error: {e}");
            }
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
