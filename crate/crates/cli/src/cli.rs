//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::anyhow;
use clap::{Arg, ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use utrl_core::augment::mock_generate;

use crate::commands::{
    cmd_ablate, cmd_augment, cmd_convert_tests, cmd_evaluate, cmd_serve_toy, cmd_train, CliError, EvaluateOptions,
    Split, Sweep, TrainOptions, CONFIG_ECHO,
};
use crate::config::{field, layer, parse_value, Kind, Preset, RunConfig, FIELDS};

#[derive(Debug, Parser)]
#[command(name = "utrl", version, about = "Actor-critic training of code policies against unit tests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML config file, layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base values before the file and field flags are applied.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and critic; writes a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the latest checkpoint in output.run_dir, using its
        /// echoed config with any field flags applied on top.
        #[arg(long)]
        resume: bool,
        /// Replace a non-empty run directory.
        #[arg(long, conflicts_with = "resume")]
        overwrite: bool,
    },
    /// Greedy solve rate and pass@k of a checkpoint.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory, or a run directory (its best checkpoint).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Report path; defaults to eval-<split>.json in the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record the wall-clock time in the report.
        #[arg(long)]
        timestamp: bool,
    },
    /// Build training instances from a source-language corpus.
    Augment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert externally generated test suites (JSON lines of description,
    /// signature and tests) into training instances.
    ConvertTests {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a grid of runs and tabulate them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        sweep: Sweep,
        #[arg(long)]
        overwrite: bool,
    },
    /// Serve the toy policy over the policy wire protocol.
    ServeToy {
        #[command(flatten)]
        config: ConfigArgs,
        /// TCP address such as 127.0.0.1:0; standard streams when absent.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    PrintConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Canned test generator for pipeline tests.
    #[command(hide = true)]
    MockGenerator {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        method: String,
    },
}

/// Subcommands that take the full config.
pub const CONFIGURED: [&str; 7] = ["train", "evaluate", "augment", "convert-tests", "ablate", "serve-toy", "print-config"];

fn field_args(cmd: clap::Command) -> clap::Command {
    FIELDS.iter().fold(cmd, |cmd, (path, kind, doc)| {
        let value_name = match kind {
            Kind::Text => "TEXT",
            Kind::Value => "VALUE",
        };
        cmd.arg(
            Arg::new(*path)
                .long(*path)
                .value_name(value_name)
                .action(ArgAction::Set)
                .help(*doc)
                .help_heading("Config fields"),
        )
    })
}

/// The full command tree, field flags included.
pub fn command() -> clap::Command {
    CONFIGURED
        .iter()
        .fold(Cli::command(), |cmd, name| cmd.mut_subcommand(*name, field_args))
}

fn overrides(matches: &ArgMatches) -> anyhow::Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    for (path, _, _) in FIELDS {
        if let Some(raw) = matches.get_one::<String>(path) {
            let (kind, _) = field(path).expect("listed field");
            let value = parse_value(kind, raw).map_err(|e| anyhow!("--{path}: {e}"))?;
            out.push((path.to_string(), value));
        }
    }
    Ok(out)
}

/// Effective config of a subcommand invocation.
pub fn resolve_config(args: &ConfigArgs, matches: &ArgMatches) -> anyhow::Result<RunConfig> {
    layer(&RunConfig::preset(args.preset), args.config.as_deref(), &overrides(matches)?)
}

fn invalid(e: anyhow::Error) -> CliError {
    CliError::Invalid(e)
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> Result<(), CliError> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match cli.command {
        Command::Train {
            config,
            resume,
            overwrite,
        } => {
            let mut cfg = resolve_config(&config, sub).map_err(invalid)?;
            if resume {
                let echo = cfg.output.run_dir.join(CONFIG_ECHO);
                if !echo.is_file() {
                    return Err(invalid(anyhow!("{} not found; nothing to resume", echo.display())));
                }
                cfg = layer(&RunConfig::default(), Some(&echo), &overrides(sub).map_err(invalid)?).map_err(invalid)?;
            }
            let record = cmd_train(&cfg, TrainOptions { resume, overwrite })?;
            if let Some(last) = record.epochs.last() {
                println!(
                    "trained {} epochs: solved {:.3}, distinct valid {}, validation {:?}",
                    last.epoch, last.generation.solved_rate, last.distinct_valid, last.validation_greedy
                );
            }
            println!("run directory: {}", cfg.output.run_dir.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            split,
            out,
            timestamp,
        } => {
            let cfg = resolve_config(&config, sub).map_err(invalid)?;
            let report = cmd_evaluate(
                &cfg,
                &EvaluateOptions {
                    checkpoint,
                    split,
                    out,
                    timestamp,
                },
            )?;
            print!("{}", report.to_table());
        }
        Command::Augment { config, corpus, out } => {
            let cfg = resolve_config(&config, sub).map_err(invalid)?;
            let report = cmd_augment(&cfg, &corpus, &out)?;
            println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Aborted(e.into()))?);
        }
        Command::ConvertTests { config, input, out } => {
            let cfg = resolve_config(&config, sub).map_err(invalid)?;
            let report = cmd_convert_tests(&cfg, &input, &out)?;
            println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Aborted(e.into()))?);
        }
        Command::Ablate {
            config,
            sweep,
            overwrite,
        } => {
            let cfg = resolve_config(&config, sub).map_err(invalid)?;
            let result = cmd_ablate(&cfg, sweep, overwrite)?;
            let mut ks = cfg.eval.ks.clone();
            ks.sort_unstable();
            ks.dedup();
            print!("{}", result.to_markdown(&ks));
        }
        Command::ServeToy {
            config,
            listen,
            checkpoint,
        } => {
            let cfg = resolve_config(&config, sub).map_err(invalid)?;
            cmd_serve_toy(&cfg, listen.as_deref(), checkpoint.as_deref())?;
        }
        Command::PrintConfig { config } => {
            let cfg = resolve_config(&config, sub).map_err(invalid)?;
            print!("{}", cfg.to_toml().map_err(invalid)?);
        }
        Command::MockGenerator {
            fixtures,
            workspace,
            class,
            method,
        } => {
            mock_generate(&fixtures, &workspace, &class, &method).map_err(|e| CliError::Aborted(e.into()))?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 for invalid input, 2 for a failure while running.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli, &matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
