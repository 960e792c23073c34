mod cmd;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fedgan::transport::TransportError;

use config::{Config, ConfigError};

/// Federated conditional-GAN lab: train, federate, evaluate and audit
/// class-conditional image generators.
#[derive(Parser)]
#[command(name = "fedgan", version, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short, global = true, env = "FEDGAN_CONFIG")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set gan.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exact output directory instead of `<out_dir>/<digest>-s<seed>/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a GAN centrally, checkpointing every epoch.
    TrainGan,
    /// Federated training, in-process or over TCP.
    Federate {
        #[command(subcommand)]
        mode: FederateMode,
    },
    /// FID, diversity and nearest-real audit over generator checkpoints.
    Evaluate {
        /// Checkpoints to score; ordered by the epoch number in their names.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
    },
    /// Downstream classification with real, generated and mixed training sets.
    AugmentClassify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Split the training set among the configured clients.
    Partition,
    /// Write the procedural texture corpus as image folders.
    MakeCorpus,
}

#[derive(Subcommand)]
enum FederateMode {
    /// All clients in this process.
    Simulate,
    /// Aggregation server for networked clients.
    Server {
        #[arg(long, env = "FEDGAN_BIND")]
        bind: Option<String>,
    },
    /// One networked client.
    Client {
        #[arg(long, env = "FEDGAN_CLIENT_ID")]
        client_id: usize,
        #[arg(long, env = "FEDGAN_SERVER")]
        server: Option<String>,
        /// Local image folder instead of this client's partition of the corpus.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<Config, ConfigError> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &common.config {
        Some(path) => Config::load(path, &overrides),
        None => Config::parse(&format!("version = {}", config::SCHEMA_VERSION), &overrides),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_deref();
    match cli.command {
        Command::TrainGan => cmd::train::run(&cfg, out),
        Command::Federate { mode } => match mode {
            FederateMode::Simulate => cmd::federate::simulate(&cfg, out),
            FederateMode::Server { bind } => {
                cmd::federate::server(&cfg, bind.as_deref().unwrap_or(&cfg.network.bind), out)
            }
            FederateMode::Client {
                client_id,
                server,
                data,
            } => cmd::federate::client(
                &cfg,
                client_id,
                server.as_deref().unwrap_or(&cfg.network.server),
                data.as_ref(),
                out,
            ),
        },
        Command::Evaluate { checkpoints } => cmd::evaluate::run(&cfg, &checkpoints, out),
        Command::AugmentClassify { checkpoint } => cmd::classify::run(&cfg, checkpoint.as_deref(), out),
        Command::Partition => cmd::partition::run(&cfg, out),
        Command::MakeCorpus => cmd::corpus::run(&cfg, out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        1
    } else if err.chain().any(|e| e.is::<TransportError>()) {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
