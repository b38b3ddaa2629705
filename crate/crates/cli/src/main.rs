//! `beliefgeo` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beliefgeo::ghmm::DEFAULT_DEDUP_TOLERANCE;
use beliefgeo::pipeline::{run_probe, run_train, sha256_hex, CheckpointSelector, RunConfig};
use beliefgeo::processes::{Parameters, ProcessSpec};
use beliefgeo::quantum::validate_channel;
use beliefgeo::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "beliefgeo", version, about = "Belief geometry of sequence models trained on generalized HMMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect, sample, enumerate or export a process.
    Process {
        #[command(subcommand)]
        action: ProcessAction,
    },
    /// Train a model as described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Probe trained checkpoints against belief targets.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `all`, `last`, or a glob over checkpoint file names.
        #[arg(long, default_value = "all")]
        checkpoints: String,
        /// Comma-separated targets, e.g. `minimal,markov3`.
        #[arg(long)]
        targets: Option<String>,
        /// Comma-separated layer selections, e.g. `all,1,2` or `1+2`.
        #[arg(long)]
        layers: Option<String>,
    },
}

#[derive(Args)]
struct ProcessArgs {
    #[arg(long)]
    name: String,
    /// Parameter override `key=value`; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ProcessAction {
    /// Dimensions, stationary vector and validation residuals.
    Info(ProcessArgs),
    /// Sampled token sequences as JSONL.
    Sample {
        #[command(flatten)]
        common: ProcessArgs,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Enumerated belief states as JSONL.
    Beliefs {
        #[command(flatten)]
        common: ProcessArgs,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = DEFAULT_DEDUP_TOLERANCE)]
        dedup_tolerance: f64,
    },
    /// The GHMM as JSON.
    Export(ProcessArgs),
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_params(raw: &[String]) -> Result<Parameters> {
    raw.iter()
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--param expects key=value, got '{kv}'")))?;
            let v: f64 = v.trim().parse().map_err(|_| usage(format!("--param {k}: '{v}' is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn build_process(args: &ProcessArgs) -> Result<ProcessSpec> {
    let name = args.name.parse().map_err(|e: Error| match e {
        Error::Input(msg) => usage(msg),
        other => other,
    })?;
    ProcessSpec::build(name, &parse_params(&args.params)?)
}

/// Digest of a process invocation, standing in for a config digest.
fn invocation_digest(value: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("json"))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn vec_json<'a>(v: impl IntoIterator<Item = &'a f64>) -> Vec<f64> {
    v.into_iter().copied().collect()
}

fn cmd_process(action: ProcessAction) -> Result<()> {
    match action {
        ProcessAction::Info(args) => {
            let spec = build_process(&args)?;
            let g = &spec.ghmm;
            let pi = g.stationary_vector()?;
            let t = g.net_transition();
            let unit_residual = (&t * g.unit_right() - g.unit_right()).amax();
            let stationary_residual = (t.tr_mul(&pi) - &pi).amax();
            let depth = if g.alphabet_size() >= 4 { 6 } else { 8 };
            let v = g.validate_words(depth);
            let mut info = json!({
                "name": spec.name.as_str(),
                "parameters": spec.parameters,
                "alphabet_size": g.alphabet_size(),
                "latent_dim": g.latent_dim(),
                "stationary_vector": vec_json(&pi),
                "initial_vector": vec_json(g.initial_vector()),
                "unit_right": vec_json(g.unit_right()),
                "residuals": {
                    "unit_eigenvector": unit_residual,
                    "stationary_eigenvector": stationary_residual,
                },
                "word_validation": {
                    "depth": v.depth,
                    "min_probability": v.min_probability,
                    "max_sum_error": v.max_sum_error,
                },
            });
            if let Some(ch) = &spec.channel {
                info["residuals"]["kraus_completeness"] = json!(validate_channel(ch));
            }
            let digest = invocation_digest(&json!({"command": "process info", "name": spec.name.as_str(), "parameters": spec.parameters}));
            info["config_digest"] = json!(digest);
            emit(&args.out, &(serde_json::to_string_pretty(&info)? + "\n"))
        }
        ProcessAction::Sample { common, count, length, seed } => {
            let spec = build_process(&common)?;
            let digest = invocation_digest(&json!({
                "command": "process sample", "name": spec.name.as_str(), "parameters": spec.parameters,
                "count": count, "length": length, "seed": seed,
            }));
            let mut text = String::new();
            for tokens in spec.ghmm.sample_sequences(count, length, seed) {
                text.push_str(&serde_json::to_string(&json!({"config_digest": digest, "tokens": tokens}))?);
                text.push('\n');
            }
            emit(&common.out, &text)
        }
        ProcessAction::Beliefs { common, depth, dedup_tolerance } => {
            if !(dedup_tolerance >= 0.0) {
                return Err(usage("--dedup-tolerance must be non-negative"));
            }
            let spec = build_process(&common)?;
            let digest = invocation_digest(&json!({
                "command": "process beliefs", "name": spec.name.as_str(), "parameters": spec.parameters,
                "depth": depth, "dedup_tolerance": dedup_tolerance,
            }));
            let set = spec.ghmm.enumerate_beliefs(depth, dedup_tolerance);
            let mut text = String::new();
            for b in &set.beliefs {
                let row = json!({
                    "config_digest": digest,
                    "word": b.word,
                    "probability": b.probability,
                    "belief": vec_json(&b.vector),
                });
                text.push_str(&serde_json::to_string(&row)?);
                text.push('\n');
            }
            emit(&common.out, &text)
        }
        ProcessAction::Export(args) => {
            let spec = build_process(&args)?;
            let mut doc = spec.ghmm.to_document();
            doc.name = Some(spec.name.to_string());
            doc.parameters = Some(spec.parameters.clone());
            let digest = invocation_digest(&json!({"command": "process export", "name": spec.name.as_str(), "parameters": spec.parameters}));
            let wrapped = json!({"config_digest": digest, "ghmm": doc});
            emit(&args.out, &(serde_json::to_string_pretty(&wrapped)? + "\n"))
        }
    }
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Process { action } => cmd_process(action),
        Command::Train { config, out, seed, resume } => {
            let cfg = load_config(&config, out, seed)?;
            let summary = run_train(&cfg, resume)?;
            let last = summary.report.rows.last();
            println!(
                "{}",
                json!({
                    "output_dir": summary.out_dir,
                    "report": summary.report_path,
                    "checkpoints_written": summary.checkpoints.len(),
                    "optimal_loss": summary.report.optimal_loss,
                    "final_epoch": last.map(|r| r.epoch),
                    "final_normalized_val_loss": last.map(|r| r.normalized_val_loss),
                })
            );
            Ok(())
        }
        Command::Probe { config, out, seed, checkpoints, targets, layers } => {
            let mut cfg = load_config(&config, out, seed)?;
            if let Some(t) = targets {
                cfg.probe.targets = split_list(&t);
            }
            if let Some(l) = layers {
                cfg.probe.layers = split_list(&l);
            }
            cfg.validate()?;
            let selector: CheckpointSelector = checkpoints.parse()?;
            let summary = run_probe(&cfg, &selector)?;
            println!(
                "{}",
                json!({
                    "report": summary.report_path,
                    "rows": summary.rows.len(),
                    "geometry_files": summary.geometry_files.len(),
                })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Input(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
