//! `pafi`: masks, training, merging, accounting and evaluation on the toy encoder.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad arguments or mismatched
//! artifacts, 3 load failure, 4 write failure, 5 frozen parameters changed.

mod commands;
mod config;
mod failure;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use commands::{derived, Run};
use config::*;
use failure::Failure;
use manifest::{hashes, RunManifest};

#[derive(Parser)]
#[command(name = "pafi", about = "Sparse masks, mergeable adapters and parameter accounting on a toy encoder")]
struct Cli {
    /// TOML file with one table per subcommand; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to the main output)
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// More log output on standard error (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (and by default pretrain) a toy encoder checkpoint
    InitModel {
        #[command(flatten)]
        args: InitModelArgs,
        #[arg(long, conflicts_with = "pretrain")]
        no_pretrain: bool,
    },
    /// Select a task-agnostic sparse mask from a checkpoint
    GenMask {
        #[command(flatten)]
        args: GenMaskArgs,
        #[arg(long, conflicts_with = "tune_norm")]
        no_tune_norm: bool,
        #[arg(long, conflicts_with = "tune_embed")]
        no_tune_embed: bool,
    },
    /// Fine-tune a checkpoint on the synthetic task
    Train(TrainArgs),
    /// Fold LoRA or HiWi adapters into the base weights
    Merge(MergeArgs),
    /// Tuned and stored parameter counts per method
    CountParams(CountParamsArgs),
    /// Dev-set metric of a checkpoint
    Eval(EvalArgs),
    /// Write the synthetic task as TSV
    DumpTask(DumpTaskArgs),
    /// Rerun a recorded command and check its outputs are byte-identical
    Replay {
        /// A run manifest written by an earlier command
        path: PathBuf,
    },
}

fn resolved<C, A>(name: &str, file: Option<&Path>, args: &A) -> Result<(String, Value), Failure>
where
    C: Default + Serialize + DeserializeOwned,
    A: Serialize,
{
    let c: C = resolve(name, file, args)?;
    Ok((name.to_owned(), serde_json::to_value(c).expect("config serializes")))
}

fn typed<C: DeserializeOwned>(config: &Value) -> Result<C, Failure> {
    serde_json::from_value(config.clone()).map_err(|e| Failure::Usage(format!("bad recorded config: {e}")))
}

fn execute(command: &str, config: &Value) -> Result<Run, Failure> {
    match command {
        "init-model" => commands::init_model(&typed(config)?),
        "gen-mask" => commands::gen_mask(&typed(config)?),
        "train" => commands::train_cmd(&typed(config)?),
        "merge" => commands::merge(&typed(config)?),
        "count-params" => commands::count_params(&typed(config)?),
        "eval" => commands::eval(&typed(config)?),
        "dump-task" => commands::dump_task(&typed(config)?),
        other => Err(Failure::Usage(format!("unknown command {other:?}"))),
    }
}

fn replay(path: &Path) -> Result<(), Failure> {
    let recorded = RunManifest::read(path)?;
    for (input, hash) in &recorded.inputs {
        let now = manifest::file_hash(Path::new(input))?;
        if &now != hash {
            return Err(Failure::Load(format!("input {input} changed since the recorded run")));
        }
    }
    let run = execute(&recorded.command, &recorded.config)?;
    let outputs = hashes(&run.outputs)?;
    let differing: Vec<&String> = recorded
        .outputs
        .iter()
        .filter(|(p, h)| outputs.get(*p) != Some(h))
        .map(|(p, _)| p)
        .collect();
    if !differing.is_empty() || outputs.len() != recorded.outputs.len() {
        return Err(Failure::Other(format!(
            "replay of {} diverged: {}",
            recorded.command,
            differing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    eprintln!("replayed {}: {} outputs identical", recorded.command, outputs.len());
    match run.deferred {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = cli.config.as_deref();
    let (name, config) = match cli.command {
        Command::Replay { path } => return replay(&path),
        Command::InitModel { mut args, no_pretrain } => {
            if no_pretrain {
                args.pretrain = Some(false);
            }
            resolved::<InitModelConfig, _>("init-model", file, &args)?
        }
        Command::GenMask {
            mut args,
            no_tune_norm,
            no_tune_embed,
        } => {
            if no_tune_norm {
                args.tune_norm = Some(false);
            }
            if no_tune_embed {
                args.tune_embed = Some(false);
            }
            resolved::<GenMaskConfig, _>("gen-mask", file, &args)?
        }
        Command::Train(a) => resolved::<TrainCliConfig, _>("train", file, &a)?,
        Command::Merge(a) => resolved::<MergeConfig, _>("merge", file, &a)?,
        Command::CountParams(a) => resolved::<CountParamsConfig, _>("count-params", file, &a)?,
        Command::Eval(a) => resolved::<EvalConfig, _>("eval", file, &a)?,
        Command::DumpTask(a) => resolved::<DumpTaskConfig, _>("dump-task", file, &a)?,
    };
    let run = execute(&name, &config)?;
    let manifest = RunManifest {
        tool: "pafi".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: name.clone(),
        config,
        seed: run.seed,
        inputs: hashes(&run.inputs)?,
        outputs: hashes(&run.outputs)?,
    };
    let path = cli
        .manifest
        .or_else(|| run.primary.as_deref().map(|p| derived(p, "manifest", "json")))
        .unwrap_or_else(|| PathBuf::from(format!("pafi-{name}.manifest.json")));
    manifest.write(&path)?;
    match run.deferred {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
