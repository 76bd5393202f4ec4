//! `ui2vec` command-line driver.
//!
//! Every command resolves a [`config::RunConfig`] from defaults, an
//! optional JSON file (`--config`) and flags, then writes its outputs to
//! `<out>/<command>-<config hash>/`. Any config key can be set with a
//! dotted flag such as `--model.d 32` or `--pretrain.adam.lr=1e-4`.

mod commands;
mod config;
mod failure;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use ui2vec::downstream::{EvalMode, Task};

use crate::config::{resolve, Flags};
use crate::failure::{CliResult, Failure};

#[derive(Parser, Debug)]
#[command(
    name = "ui2vec",
    version,
    about = "Multimodal UI encoder: data, pretraining, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parent of the run directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Number of UIs to generate (`gen.n_uis`).
    #[arg(long, global = true)]
    n: Option<usize>,

    /// retrieval, referring, sync, app_type or icon.
    #[arg(long, global = true)]
    task: Option<Task>,

    /// zero_shot or finetuned.
    #[arg(long, global = true)]
    mode: Option<EvalMode>,

    /// Data directory written by `synth` (`paths.data`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Checkpoint to load (`paths.checkpoint`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic corpus and task files.
    Synth,
    /// Self-aligned pretraining.
    Pretrain,
    /// Finetune on one task and report on its test split.
    Finetune,
    /// Evaluate one task on its test split.
    Eval,
    /// Export CLS and component embeddings as CSV.
    Embed,
    /// Generate masked content descriptions.
    Gendesc,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Embed => "embed",
            Command::Gendesc => "gendesc",
        }
    }
}

type Overrides = Vec<(String, String)>;

/// Pulls `--a.b value` and `--a.b=value` pairs out of the arguments.
fn split_overrides(args: Vec<OsString>) -> CliResult<(Vec<OsString>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| Failure::config(format!("--{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn run() -> CliResult<()> {
    let (args, overrides) = split_overrides(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(Failure::config(first.trim_start_matches("error: ")));
        }
    };
    let flags = Flags {
        seed: cli.seed,
        n: cli.n,
        task: cli.task,
        mode: cli.mode,
        data: cli.data.clone(),
        checkpoint: cli.checkpoint.clone(),
    };
    let cfg = resolve(cli.config.as_deref(), &overrides, &flags)?;
    cfg.validate(&cli.out)?;
    let name = cli.command.name();
    let run_dir = cli.out.join(format!("{name}-{}", cfg.hash(name)));
    std::fs::create_dir_all(&run_dir).map_err(|e| Failure::config(format!("{}: {e}", run_dir.display())))?;
    let mut resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    resolved.push('\n');
    std::fs::write(run_dir.join("config.json"), resolved)
        .map_err(|e| Failure::config(format!("{}: {e}", run_dir.display())))?;
    let summary = match cli.command {
        Command::Synth => commands::synth(&cfg, &run_dir)?,
        Command::Pretrain => commands::pretrain_cmd(&cfg, &run_dir)?,
        Command::Finetune => commands::finetune_cmd(&cfg, &run_dir)?,
        Command::Eval => commands::eval_cmd(&cfg, &run_dir)?,
        Command::Embed => commands::embed(&cfg, &run_dir)?,
        Command::Gendesc => commands::gendesc(&cfg, &run_dir)?,
    };
    println!("{}", json!({ "command": name, "run_dir": run_dir, "result": summary }));
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.kind.exit_code() as u8)
        }
    }
}
