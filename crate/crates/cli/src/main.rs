use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use omnienc_cli::{commands, Failure, Output, RunConfig};

#[derive(Parser)]
#[command(
    name = "omnienc",
    version,
    about = "Audio-visual encoder toolkit: planning, checks, benchmarks and toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Token budget for the configured clip
    Plan(Flags),
    /// Run the invariant suite
    Check(Flags),
    /// Attention pair counts and forward timings over clip durations
    Bench(Flags),
    /// Train on a synthetic task and save a checkpoint
    Train(Flags),
    /// Score a checkpoint on a generated split
    Eval(Flags),
    /// Dump one layer's block mask and the coordinate table
    Masks(Flags),
    /// Write a synthetic dataset
    Gen(Flags),
}

/// Flags shared by every subcommand; each one overrides a config key.
#[derive(Args)]
struct Flags {
    /// Run configuration document (key=value lines)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// none|no-remap|vb-only|no-shift|audio-zero
    #[arg(long)]
    ablate: Option<String>,
    /// motion|av-sync|modality-probe
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    /// Clip length in seconds; overrides --frames
    #[arg(long)]
    seconds: Option<String>,
    #[arg(long)]
    fps: Option<String>,
    #[arg(long = "vb-fps")]
    vb_fps: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "n-train")]
    n_train: Option<String>,
    #[arg(long = "n-eval")]
    n_eval: Option<String>,
    /// train|eval
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated clip durations in seconds for bench
    #[arg(long = "t-list")]
    t_list: Option<String>,
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<String>,
    /// Layer index for masks
    #[arg(long)]
    layer: Option<String>,
    /// Any other config key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    fn overrides(&self) -> Vec<(String, String)> {
        let named = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("ablate", &self.ablate),
            ("task", &self.task),
            ("frames", &self.frames),
            ("seconds", &self.seconds),
            ("fps", &self.fps),
            ("vb_fps", &self.vb_fps),
            ("height", &self.height),
            ("width", &self.width),
            ("group", &self.group),
            ("tau", &self.tau),
            ("layers", &self.layers),
            ("dim", &self.dim),
            ("heads", &self.heads),
            ("patch", &self.patch),
            ("steps", &self.steps),
            ("lr", &self.lr),
            ("n_train", &self.n_train),
            ("n_eval", &self.n_eval),
            ("split", &self.split),
            ("t_list", &self.t_list),
            ("checkpoint", &self.checkpoint),
            ("layer", &self.layer),
        ];
        let mut out: Vec<(String, String)> = self
            .set
            .iter()
            .map(|kv| match kv.split_once('=') {
                Some((k, v)) => (k.trim().to_string(), v.to_string()),
                None => (kv.clone(), String::new()),
            })
            .collect();
        out.extend(
            named
                .into_iter()
                .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
        );
        out
    }
}

fn run(command: Command) -> Result<Output, Failure> {
    let (flags, action): (Flags, fn(&RunConfig) -> Result<Output, Failure>) = match command {
        Command::Plan(f) => (f, commands::plan),
        Command::Check(f) => (f, commands::check),
        Command::Bench(f) => (f, commands::bench),
        Command::Train(f) => (f, commands::train),
        Command::Masks(f) => (f, commands::masks),
        Command::Gen(f) => (f, commands::gen),
        Command::Eval(f) => {
            let cfg = RunConfig::resolve_from_checkpoint(f.config.as_deref(), &f.overrides())?;
            return commands::eval(&cfg);
        }
    };
    let cfg = RunConfig::resolve(flags.config.as_deref(), &flags.overrides())?;
    action(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(out) => {
            print!("{}", out.stdout);
            eprint!("{}", out.stderr);
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    let _ = std::io::stdout().flush();
    ExitCode::from(code as u8)
}
