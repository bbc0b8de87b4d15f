use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pickle_cli::Overrides;

#[derive(Parser)]
#[command(name = "pickle", version, about = "Conditional Karhunen-Loeve inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replica of an experiment and write the report.
    Run(Common),
    /// Error against the number of parameter modes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated N_xi values.
        #[arg(long, value_delimiter = ',', required = true)]
        n_xi: Vec<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    replicas: Option<usize>,
    /// Replicas run concurrently.
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for cached expansions.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Base seed; replica seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            replicas: self.replicas,
            threads: self.threads,
            cache: self.cache.clone(),
            seed: self.seed,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(c) => pickle_cli::load_config(&c.config)
            .and_then(|cfg| pickle_cli::run(cfg, &c.overrides(), &c.out))
            .map(|dir| println!("{}", dir.display())),
        Command::Sweep { common, n_xi } => pickle_cli::load_config(&common.config)
            .and_then(|cfg| pickle_cli::sweep(cfg, n_xi, &common.overrides(), &common.out))
            .map(|(dir, _)| println!("{}", dir.display())),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
