//! `dlic`: train, encode, decode, evaluate and one-step workflows.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlic::{AdapterKind, GateMode};

use config::RunConfig;
use error::CliError;

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "DLIC_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "dlic", version, about = "Instance-adaptive learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory name under $DLIC_RUN_ROOT (default: the command name).
    #[arg(long, global = true)]
    run: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training λ for `train`; adaptation λ elsewhere.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    steps_latent: Option<usize>,
    #[arg(long, global = true)]
    steps_model: Option<usize>,
    #[arg(long, global = true)]
    warmup: Option<usize>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// low_rank, bias_only, svd, adapter or fine_tune.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Always update the first m decoder layers.
    #[arg(long, global = true, conflicts_with = "dynamic")]
    fixed_layers: Option<usize>,
    /// Learned per-layer gates.
    #[arg(long, global = true)]
    dynamic: bool,
    /// Worker threads for per-image evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Directory of PNG images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Seeded generator: natural, pixel, vector or ood.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a base codec and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Refine, adapt and write a `.dlic` blob plus its loss trace.
    Encode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Reconstruct an image from a blob and the checkpoint alone.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Original image; prints the PSNR of the decode.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// RD records, BD-rate tables, gate frequencies and plots.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated checkpoints, one per λ.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated methods (`fixed-m`, `dynamic`); the first is the anchor.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// Comma-separated steps grid for the steps sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        /// Rebuild tables and plots from an existing records CSV.
        #[arg(long)]
        from_records: Option<PathBuf>,
    },
    /// Cluster a corpus and fit one delta per cluster.
    OnestepBuild {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        fit_steps: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Encode with the nearest cluster's delta; no gradient steps.
    OnestepEncode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::Eval { .. } => "eval",
            Command::OnestepBuild { .. } => "onestep-build",
            Command::OnestepEncode { .. } => "onestep-encode",
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_data(cfg: &mut RunConfig, d: DataArgs) {
    set_opt(&mut cfg.data.images, d.images);
    set(&mut cfg.data.synthetic, d.synthetic);
    set(&mut cfg.data.count, d.count);
    set(&mut cfg.data.size, d.size);
    set(&mut cfg.data.seed, d.data_seed);
}

/// Loads the config file and folds every command-line override into it.
fn resolve(cli: Cli) -> Result<(RunConfig, Command), CliError> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set_opt(&mut cfg.run, c.run);
    set(&mut cfg.seed, c.seed);
    set(&mut cfg.jobs, c.jobs);
    set(&mut cfg.adapt.n1, c.steps_latent);
    set(&mut cfg.adapt.n2, c.steps_model);
    set(&mut cfg.adapt.warmup, c.warmup);
    if let Some(r) = c.rank {
        cfg.adapt.rank = r;
        cfg.onestep.rank = r;
    }
    if let Some(v) = &c.variant {
        cfg.adapt.variant = v.parse::<AdapterKind>().map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(m) = c.fixed_layers {
        cfg.adapt.gate_mode = GateMode::Fixed(m);
    }
    if c.dynamic {
        cfg.adapt.gate_mode = GateMode::Dynamic;
    }
    let is_train = matches!(cli.command, Command::Train { .. });
    if let Some(l) = c.lambda {
        if is_train {
            cfg.train.lambda = l;
        } else {
            cfg.adapt.lambda = Some(l);
            cfg.onestep.lambda = Some(l);
        }
    }
    let mut command = cli.command;
    match &mut command {
        Command::Train { data, steps, output } => {
            apply_data(&mut cfg, std::mem::take(data));
            set(&mut cfg.train.steps, steps.take());
            set_opt(&mut cfg.output, output.take());
        }
        Command::Encode {
            checkpoint,
            input,
            output,
        }
        | Command::Decode {
            checkpoint,
            input,
            output,
            ..
        } => {
            set_opt(&mut cfg.checkpoint, checkpoint.take());
            set_opt(&mut cfg.input, input.take());
            set_opt(&mut cfg.output, output.take());
        }
        Command::Eval {
            data,
            checkpoints,
            modes,
            sweep,
            from_records,
        } => {
            apply_data(&mut cfg, std::mem::take(data));
            if !checkpoints.is_empty() {
                cfg.eval.checkpoints = std::mem::take(checkpoints);
            }
            if !modes.is_empty() {
                cfg.eval.modes = std::mem::take(modes);
            }
            if !sweep.is_empty() {
                cfg.eval.sweep = std::mem::take(sweep);
            }
            set_opt(&mut cfg.eval.from_records, from_records.take());
        }
        Command::OnestepBuild {
            data,
            checkpoint,
            clusters,
            fit_steps,
            output,
        } => {
            apply_data(&mut cfg, std::mem::take(data));
            set_opt(&mut cfg.checkpoint, checkpoint.take());
            set(&mut cfg.onestep.n_clusters, clusters.take());
            set(&mut cfg.onestep.fit_steps, fit_steps.take());
            set_opt(&mut cfg.output, output.take());
        }
        Command::OnestepEncode {
            checkpoint,
            bank,
            input,
            output,
        } => {
            set_opt(&mut cfg.checkpoint, checkpoint.take());
            set_opt(&mut cfg.bank, bank.take());
            set_opt(&mut cfg.input, input.take());
            set_opt(&mut cfg.output, output.take());
        }
    }
    if let Command::Decode { reference, .. } = &mut command {
        set_opt(&mut cfg.reference, reference.take());
    }
    if cfg.jobs == 0 {
        return Err(CliError::Config("jobs must be at least 1".into()));
    }
    cfg.adapt_config().validate()?;
    Ok((cfg, command))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, command) = resolve(cli)?;
    let name = command.name();
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let dir = root.join(cfg.run.as_deref().unwrap_or(name));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let snapshot = dir.join("config.toml");
    std::fs::write(&snapshot, cfg.to_toml()?).map_err(|e| CliError::io(&snapshot, e))?;
    let ctx = commands::Context { cfg, dir };
    match command {
        Command::Train { .. } => commands::train(&ctx),
        Command::Encode { .. } => commands::encode(&ctx),
        Command::Decode { .. } => commands::decode(&ctx),
        Command::Eval { .. } => commands::eval(&ctx),
        Command::OnestepBuild { .. } => commands::onestep_build(&ctx),
        Command::OnestepEncode { .. } => commands::onestep_encode(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dlic: error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
