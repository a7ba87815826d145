use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, ValueEnum};
use lot_cli::{dispatch, parse_config, Command, Invocation};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CommandArg {
    Train,
    TeacherOnly,
    Ban,
    Hypothesis,
    SweepAlpha,
    SweepN,
    Compare,
    Rl,
    RlCompare,
    EvalCheckpoint,
}

/// Teacher-student imitability experiments.
///
/// Settings come from built-in defaults, then `--config`, then `key=value`
/// overrides, then the LOT_SEED environment variable for `seed`.
/// Exit codes: 0 success, 1 run failure, 2 configuration error, 3 failed verdict.
#[derive(Debug, Parser)]
#[command(name = "lot", version)]
struct Cli {
    #[arg(value_enum)]
    command: CommandArg,
    /// Flat dotted-key config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to runs/<command>.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads for independent replicates.
    #[arg(long)]
    threads: Option<usize>,
    /// Checkpoint to evaluate with `eval-checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config overrides such as `lot.alpha=0.5`.
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            eprint!("{e}");
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let command = Command::parse(
        cli.command
            .to_possible_value()
            .expect("every command has a name")
            .get_name(),
    )
    .expect("command names match");
    let mut overrides = cli.overrides;
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let lot_seed = std::env::var("LOT_SEED").ok();
    let run = parse_config(cli.config.as_deref(), &overrides, lot_seed.as_deref()).and_then(|config| {
        let inv = Invocation {
            command,
            config,
            out_dir: cli.out.unwrap_or_else(|| PathBuf::from("runs").join(command.name())),
            force: cli.force,
            checkpoint: cli.checkpoint,
        };
        dispatch(&inv)
    });
    match run {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report.metrics).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lot: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
