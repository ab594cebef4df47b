//! Batch experiment runner.
//!
//! Subcommands:
//!   run    --config <file> [--out <dir>] [--seeds 1,2,3]
//!          [--algorithm dpfcrn|fedsgd] [--override key=value]...
//!   audit  --config <file>    print the privacy ledger without training
//!   derive --config <file>    print the derived (tau, T, sigma^2)
//!
//! Exit codes: 0 success, 2 config/precondition failure, 3 runtime failure.

use clap::{Parser, Subcommand};
use dpfcrn_core::config::ExperimentConfig;
use dpfcrn_core::{experiment, privacy, Error};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dpfcrn", about = "Federated cubic-regularized Newton experiments with DP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over all seeds and emit outputs
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to the config's output_dir, then "out")
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list overriding the config
        #[arg(long)]
        seeds: Option<String>,
        /// Algorithm override
        #[arg(long)]
        algorithm: Option<String>,
        /// Dotted-path config overrides, e.g. --override dp.epsilon=0.6
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the privacy ledger for the configured run without training
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the derived schedule (tau, T, sigma^2)
    Derive {
        #[arg(long)]
        config: PathBuf,
    },
}

fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), Error> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override \"{spec}\" is not KEY=VALUE")))?;
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            node.as_object_mut()
                .ok_or_else(|| Error::Config(format!("override path \"{path}\" not an object")))?
                .insert(part.to_string(), value);
            return Ok(());
        }
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path \"{path}\" not an object")))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

fn load_config(
    path: &PathBuf,
    seeds: Option<&str>,
    algorithm: Option<&str>,
    overrides: &[String],
) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    if let Some(seeds) = seeds {
        let parsed: Result<Vec<u64>, _> = seeds.split(',').map(|s| s.trim().parse()).collect();
        let parsed =
            parsed.map_err(|_| Error::Config(format!("bad seed list \"{seeds}\"")))?;
        doc["seeds"] = serde_json::json!(parsed);
    }
    if let Some(algo) = algorithm {
        let _: dpfcrn_core::config::Algorithm = algo.parse()?;
        doc["algorithm"] = serde_json::json!(algo);
    }
    let cfg = ExperimentConfig::from_json(&serde_json::to_string(&doc)?)?;
    Ok(cfg)
}

/// Print to stdout, propagating failures (a closed pipe downstream is
/// normal for `audit | head` style use and handled quietly in main).
fn emit(text: &str) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<bool, Error> {
    let out_dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let output = experiment::run_experiment(cfg)?;
    let files = experiment::emit_outputs(&output, &out_dir)?;
    for f in &files {
        emit(&format!("wrote {}", f.display()))?;
    }
    emit(&format!(
        "composed privacy: eps = {:.6}, delta = {:.6}, ledger {}",
        output.manifest.composed_eps,
        output.manifest.composed_delta,
        if output.manifest.ledger_valid { "valid" } else { "FLAGGED INVALID" }
    ))?;
    if let Some(failure) = &output.table.failure {
        eprintln!("run aborted: {failure}");
        return Ok(false);
    }
    Ok(true)
}

fn cmd_audit(cfg: &ExperimentConfig) -> Result<(), Error> {
    let schedule = experiment::derive_only(cfg)?;
    let ledger = privacy::audit_total(&schedule.calibration, &cfg.dp);
    let doc = ledger.export_json(&schedule.calibration);
    emit(&serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn cmd_derive(cfg: &ExperimentConfig) -> Result<(), Error> {
    let s = experiment::derive_only(cfg)?;
    emit(&serde_json::to_string_pretty(&serde_json::json!({
        "tau": s.tau,
        "t_rounds": s.t_rounds,
        "sigma_sq": s.sigma_sq,
        "m": s.m,
        "d": s.d,
    }))?)?;
    Ok(())
}

fn exit_for(err: &Error) -> ExitCode {
    if err.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<bool, Error> = match &cli.command {
        Command::Run {
            config,
            out,
            seeds,
            algorithm,
            overrides,
        } => load_config(config, seeds.as_deref(), algorithm.as_deref(), overrides)
            .and_then(|cfg| cmd_run(&cfg, out.clone())),
        Command::Audit { config } => {
            load_config(config, None, None, &[]).and_then(|cfg| cmd_audit(&cfg).map(|_| true))
        }
        Command::Derive { config } => {
            load_config(config, None, None, &[]).and_then(|cfg| cmd_derive(&cfg).map(|_| true))
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
