use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtlns_cli::artifacts::Locked;
use dtlns_cli::commands::{self, Command, EXIT_CONFIG, EXIT_LOCKED};
use dtlns_cli::config::RunConfig;
use dtlns_core::synth::BlockSpec;

#[derive(Parser)]
#[command(name = "dtlns", version, about = "Dual-tree false-negative identification and hard negative sampling")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces `run.seeds` with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// k-core filter, split and optional false-negative injection.
    Prepare(Common),
    /// Pretrain if needed, then build both index trees and the path codes.
    BuildTrees(Common),
    /// Classify candidate items and augment the train set.
    IdentifyFn(Common),
    /// Train every configured seed and write results.
    Train(Common),
    /// Score checkpoints on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// A single checkpoint instead of the trained seeds.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Planted false-negative recovery with forced probes.
    FnAccuracy(Common),
    /// Write a planted block-structured interaction file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
    },
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.set("run.seeds", &s.to_string())?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, common, checkpoint) = match cli.command {
        Cmd::Prepare(c) => (Command::Prepare, c, None),
        Cmd::BuildTrees(c) => (Command::BuildTrees, c, None),
        Cmd::IdentifyFn(c) => (Command::IdentifyFn, c, None),
        Cmd::Train(c) => (Command::Train, c, None),
        Cmd::Evaluate { common, checkpoint } => (Command::Evaluate, common, checkpoint),
        Cmd::FnAccuracy(c) => (Command::FnAccuracy, c, None),
        Cmd::Synth { out, seed, users, items, density } => {
            let spec = BlockSpec { users, items, density, seed, ..BlockSpec::default() };
            return match commands::synth(&spec, &out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("synth failed: {e:#}");
                    ExitCode::from(Command::Synth.exit_code() as u8)
                }
            };
        }
    };
    let cfg = match load_config(&common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match commands::run(cmd, &cfg, &common.out, checkpoint.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Locked>() => {
            eprintln!("{e}");
            ExitCode::from(EXIT_LOCKED as u8)
        }
        Err(e) => {
            eprintln!("{} failed: {e:#}", cmd.name());
            ExitCode::from(cmd.exit_code() as u8)
        }
    }
}
