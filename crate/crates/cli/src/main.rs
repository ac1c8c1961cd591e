use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use favit_cli::commands;
use favit_cli::config::{parse_pairs, RunConfig};
use favit_cli::{CliError, Result};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  configuration error (unknown key, bad value, inconsistent settings)
  3  data error (missing, truncated or malformed dataset or image files)
  4  numeric error (non-finite values, shape or accounting mismatch)
  5  check failed (gradcheck above tolerance)";

#[derive(Parser, Debug)]
#[command(name = "favit", version, about = "Superpixel-pooled, latent-attention vision transformers", after_help = EXIT_CODES)]
struct Cli {
    /// Flat key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// desk or full
    #[arg(long, global = true)]
    preset: Option<String>,
    /// baseline, sppp, lla or sppp+lla
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra config entry, applied after the file; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run SLIC on an image and write its label grid
    Segment {
        #[arg(long)]
        image: PathBuf,
    },
    /// Report superpixel groups, centroids and token norms for an image
    Tokenize {
        #[arg(long)]
        image: PathBuf,
    },
    /// Train on the configured dataset, writing metrics and checkpoints
    Train,
    /// Evaluate a checkpoint on the test split
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cost report: score entries, multiply-accumulates, memory, time
    Bench {
        /// Comma-separated variants to compare
        #[arg(long)]
        variants: Option<String>,
        /// Benchmark this image instead of synthetic ones
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        #[arg(long)]
        variants: Option<String>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut pairs = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    let mut push = |k: &str, v: String| pairs.push((k.to_string(), v));
    if let Some(s) = cli.seed {
        push("seed", s.to_string());
    }
    if let Some(p) = &cli.preset {
        push("preset", p.clone());
    }
    if let Some(v) = &cli.variant {
        push("variant", v.clone());
    }
    if let Some(o) = &cli.out {
        push("out", o.display().to_string());
    }
    if let Command::Bench { variants: Some(v), .. } | Command::Gradcheck { variants: Some(v) } = &cli.command {
        push("variants", v.clone());
    }
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        if !RunConfig::is_key(k.trim()) {
            return Err(CliError::Config(format!("unknown config key `{}`", k.trim())));
        }
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    RunConfig::from_pairs(&pairs)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = run_config(cli)?;
    match &cli.command {
        Command::Segment { image } => commands::segment(&cfg, image),
        Command::Tokenize { image } => commands::tokenize(&cfg, image),
        Command::Train => commands::train(&cfg),
        Command::Eval { checkpoint } => commands::eval(&cfg, checkpoint.as_deref()),
        Command::Bench { image, .. } => commands::bench(&cfg, image.as_deref()),
        Command::Gradcheck { .. } => commands::gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("favit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
