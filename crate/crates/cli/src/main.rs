use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use capsule_transformer::model::LayerRange;
use capsule_transformer::train::TaskKind;
use capsule_transformer::Error;
use capsule_transformer_cli::commands::{self, resolve};
use capsule_transformer_cli::{Overrides, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "capsformer", version, about = "Capsule routing self-attention on synthetic seq2seq tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vanilla,
    Capsule,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    no_vertical: bool,
    #[arg(long)]
    no_horizontal: bool,
    /// Encoder/decoder layers that route, 1-based and inclusive, e.g. `1..2`.
    #[arg(long, value_parser = parse_range)]
    routing_layers: Option<LayerRange>,
    /// Routing iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            task: self.task,
            variant: self.variant.map(|v| match v {
                VariantArg::Vanilla => Variant::Vanilla,
                VariantArg::Capsule => Variant::Capsule,
            }),
            no_vertical: self.no_vertical,
            no_horizontal: self.no_horizontal,
            routing_layers: self.routing_layers,
            iters: self.iters,
            seed: self.seed,
            steps: self.steps,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic task; writes checkpoints, metrics and the resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy-decode a validation set and report token accuracy, sequence accuracy and BLEU.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `src<TAB>tgt` dataset file; defaults to the configured validation split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write encoder self-attention weights for one input as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Space-separated source token ids.
        #[arg(long)]
        input: String,
        #[arg(long, default_value = "attention.csv")]
        out: PathBuf,
    },
    /// Run dynamic routing on a votes file and print the result.
    RouteDemo {
        votes: PathBuf,
        /// Overrides the iteration count in the file.
        #[arg(long)]
        iters: Option<usize>,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_range(s: &str) -> Result<LayerRange, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(cli: Cli) -> capsule_transformer::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { run, out: dir, resume } => {
            let cfg = resolve(run.config.as_deref(), &run.overrides())?;
            let summary = commands::cmd_train(&cfg, &dir, resume, &mut out)?;
            writeln!(out, "checkpoint {}", summary.checkpoint.display())?;
        }
        Command::Eval { run, checkpoint, data } => {
            let cfg = resolve(run.config.as_deref(), &run.overrides())?;
            let m = commands::cmd_eval(&checkpoint, &cfg, data.as_deref())?;
            writeln!(out, "event=eval {m}")?;
        }
        Command::ExportAttention { checkpoint, input, out: path } => {
            let rows = commands::cmd_export_attention(&checkpoint, &input, &path)?;
            writeln!(out, "wrote {rows} rows to {}", path.display())?;
        }
        Command::RouteDemo { votes, iters } => {
            let (_, printed) = commands::cmd_route_demo(&votes, iters)?;
            write!(out, "{printed}")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
