mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "neudye", version, about = "Neural dynamic equivalents of external power subsystems")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a built-in test system as grid.json + partition.json.
    Fixture {
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-model fault simulation to CSV.
    Simulate {
        #[arg(long)]
        grid: PathBuf,
        /// A single fault scenario, or a scenario set (then --out is a directory).
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Adds tie-current and port-voltage channels.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded fault scenario set.
    Scenarios {
        #[arg(long, value_delimiter = ',')]
        buses: Vec<usize>,
        #[arg(long)]
        t_fault: f64,
        #[arg(long)]
        clear_min: f64,
        #[arg(long)]
        clear_max: f64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an equivalent on a directory of trajectories.
    Train {
        #[arg(long, value_parser = ["pi", "dp", "dp-rnn", "discrete"])]
        variant: String,
        #[arg(long)]
        d_matrix: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop evaluation of trained equivalents.
    Eval {
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Electrical distance from a fault bus to the nearest training bus.
    Distance {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_delimiter = ',')]
        train_buses: Vec<usize>,
        #[arg(long)]
        test_bus: usize,
    },
    /// Re-execute a command from its manifest after checking input hashes.
    Rerun { manifest: PathBuf },
}

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command, &args[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
