mod checkpoint;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgqave_core::exec::init_thread_pool;
use lgqave_core::numcore::PoolMode;
use lgqave_core::Result;

use commands::Output;
use config::RunConfig;

/// Video question answering with question-guided frame selection and
/// dynamic scene graphs.
#[derive(Parser, Debug)]
#[command(name = "lgqave", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Print per-frame scores and selections as NDJSON.
    Select,
    /// Print per-graph statistics as NDJSON.
    Graphs,
    /// Train a model and write it to the output directory.
    Train,
    /// Evaluate a trained model on a split.
    Eval,
    /// Check analytic gradients against central differences.
    Gradcheck,
    /// Train and test every ablation configuration.
    Ablate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolArg {
    Mean,
    Max,
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// TOML file of run settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Frame selection threshold.
    #[arg(long, global = true, value_name = "F")]
    beta: Option<f32>,
    /// Weight of the local representations in the fused feature.
    #[arg(long, global = true, value_name = "F")]
    gamma: Option<f32>,
    /// Weight of the video-question loss.
    #[arg(long, global = true, value_name = "F")]
    lambda: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pool: Option<PoolArg>,
    #[arg(long, global = true)]
    no_sampling: bool,
    #[arg(long, global = true)]
    no_grounding: bool,
    #[arg(long, global = true)]
    no_local: bool,
    /// Omit timing fields so repeated runs print identical bytes.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset directory holding the split manifests.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Split used by select, graphs, eval and ablate.
    #[arg(long, global = true, value_parser = ["train", "val", "test"])]
    split: Option<String>,
}

impl Flags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(beta) = self.beta {
            cfg.beta = beta;
            cfg.calibrate_beta = false;
        }
        if let Some(gamma) = self.gamma {
            cfg.gamma = gamma;
        }
        if let Some(lambda) = self.lambda {
            cfg.lambda = lambda;
        }
        if let Some(pool) = self.pool {
            cfg.pool = match pool {
                PoolArg::Mean => PoolMode::Mean,
                PoolArg::Max => PoolMode::Max,
            };
        }
        cfg.sampling &= !self.no_sampling;
        cfg.grounding &= !self.no_grounding;
        cfg.local &= !self.no_local;
        cfg.deterministic |= self.deterministic;
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(data) = &self.data {
            cfg.data = data.clone();
        }
        if let Some(split) = &self.split {
            cfg.split = split.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let cfg = cli.flags.resolve()?;
    let threads = init_thread_pool();
    log::debug!("{threads} worker threads");
    let mut out = Output::new(std::io::stdout().lock());
    match cli.command {
        Command::Synth => commands::synth(&cfg, &mut out),
        Command::Select => commands::select_frames(&cfg, &mut out),
        Command::Graphs => commands::graphs(&cfg, &mut out),
        Command::Train => commands::train(&cfg, &mut out),
        Command::Eval => commands::eval(&cfg, &mut out),
        Command::Gradcheck => commands::gradcheck(&cfg, &mut out),
        Command::Ablate => commands::ablate(&cfg, &mut out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
