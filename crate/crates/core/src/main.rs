use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use recurseq::cli::{self, Command, Invocation, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CommandArg {
    Train,
    Eval,
    Embed,
    Attribute,
    Retrieve,
    Repl,
}

/// Recursive convolutional auto-encoders for text: training, evaluation,
/// sentence embeddings, attribution heatmaps and response retrieval.
#[derive(Debug, Parser)]
#[command(name = "recurseq", version)]
struct Args {
    command: CommandArg,
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn invocation(args: Args) -> recurseq::Result<Invocation> {
    let mut config = RunConfig::load(&args.config)?;
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let command = match args.command {
        CommandArg::Train => Command::Train,
        CommandArg::Eval => Command::Eval,
        CommandArg::Embed => Command::Embed,
        CommandArg::Attribute => Command::Attribute,
        CommandArg::Retrieve => Command::Retrieve,
        CommandArg::Repl => Command::Repl,
    };
    Ok(Invocation { command, config, checkpoint: args.checkpoint, input: args.input, output: args.output })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { cli::EXIT_USAGE as u8 } else { 0 });
        }
    };
    let result = cli::thread_cap(std::env::var("RECURSEQ_THREADS").ok().as_deref()).and_then(|threads| {
        log::debug!("running with at most {threads} thread(s)");
        let inv = invocation(args)?;
        cli::run(&inv, &mut std::io::stdin().lock(), &mut std::io::stdout().lock())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
