mod commands;
mod fail;
mod manifest;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::Value;

use commands::*;
use fail::{CliError, CliResult};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage: unknown flag, bad value, bad --config
  3  missing input file
  4  schema mismatch or unreadable input
  5  data problem (too few observations, unknown group or region, ...)
  6  numerical failure (divergence, non-finite values)
  7  replay produced different outputs or inputs changed

Errors are printed to stderr as one JSON line: {\"error\":..,\"code\":..,\"message\":..}";

#[derive(Parser, Debug)]
#[command(name = "labmae", version, about = "Masked-autoencoder imputation for lab panels", after_help = EXIT_CODES)]
struct Cli {
    /// JSON object overriding defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (falls back to LABMAE_THREADS, then all cores).
    #[arg(long, global = true, env = "LABMAE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Train a model on the training split of a cohort.
    Train(TrainArgs),
    /// Predict missing values with a trained model.
    Impute(ImputeArgs),
    /// Per-feature metrics for each method on the test split.
    Eval(EvalArgs),
    /// Metrics stratified by demographic group.
    Fairness(FairnessArgs),
    /// Metrics with and without follow-up values.
    Followup(FollowupArgs),
    /// Energy and emissions of imputation across batch sizes and regions.
    Carbon(CarbonArgs),
    /// Tables and charts from earlier outputs.
    Report(ReportArgs),
    /// Re-execute a run from its manifest and compare outputs.
    Replay(ReplayArgs),
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.try_get_raw(id).is_ok()
        && matches!(
            m.value_source(id),
            Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable)
        )
}

/// Overlays `--config` onto the parsed arguments of one subcommand.
fn resolve<T>(args: T, seed: u64, m: &ArgMatches, config: Option<&Value>) -> CliResult<(T, u64)>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let Some(cfg) = config else {
        return Ok((args, seed));
    };
    let mut v = serde_json::to_value(&args).map_err(|e| CliError::internal(e.to_string()))?;
    if let Value::Object(o) = &mut v {
        o.insert("seed".into(), seed.into());
    }
    manifest::overlay(&mut v, cfg, &|k| explicit(m, k))?;
    let seed = v["seed"]
        .as_u64()
        .ok_or_else(|| CliError::usage("config `seed` must be a non-negative integer"))?;
    if let Value::Object(o) = &mut v {
        o.remove("seed");
    }
    let args = serde_json::from_value(v).map_err(|e| CliError::usage(format!("--config: {e}")))?;
    Ok((args, seed))
}

fn run(matches: &ArgMatches) -> CliResult<()> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| CliError::usage(first_line(&e.to_string())))?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::internal(e.to_string()))?;
    }
    let config = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| CliError::usage(format!("--config: {e}")))?)
        }
        None => None,
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cfg = config.as_ref();
    let out = cli.out_dir.as_path();
    match cli.cmd {
        Cmd::Synth(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_synth(&a, s, out).map(drop)
        }
        Cmd::Train(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_train(&a, s, out).map(drop)
        }
        Cmd::Impute(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_impute(&a, s, out).map(drop)
        }
        Cmd::Eval(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_eval(&a, s, out).map(drop)
        }
        Cmd::Fairness(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_fairness(&a, s, out).map(drop)
        }
        Cmd::Followup(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_followup(&a, s, out).map(drop)
        }
        Cmd::Carbon(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_carbon(&a, s, out).map(drop)
        }
        Cmd::Report(a) => {
            let (a, s) = resolve(a, cli.seed, sub, cfg)?;
            cmd_report(&a, s, out).map(drop)
        }
        Cmd::Replay(a) => {
            if cfg.is_some() {
                return Err(CliError::usage(format!("{name} takes no --config")));
            }
            cmd_replay(&a, out)
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
            }
            eprintln!("{}", CliError::usage(first_line(&e.to_string())).line());
            return ExitCode::from(fail::Kind::Usage as u8);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind as u8)
        }
    }
}
