use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use dual_lqr::cli::{exit, run, Command, RunConfig};

/// Data-driven adaptive LQ control: Riccati solves, closed-loop
/// simulation, robustness certificates and parameter sweeps.
#[derive(Debug, Parser)]
#[command(name = "dual-lqr", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `out_dir`, else the current directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = RunConfig::load(&args.config).and_then(|mut config| {
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        let out_dir = args.out_dir.clone().or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
        run(args.command, &config, &out_dir)
    });
    match code {
        Ok(c) => ExitCode::from(c as u8),
        Err(e) => {
            eprintln!("dual-lqr {}: {e}", args.command.name());
            ExitCode::from(exit::CONFIG as u8)
        }
    }
}
