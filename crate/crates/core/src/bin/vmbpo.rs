use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vmbpo::harness::{cmd_check, cmd_solve, cmd_train, exit_code, RunConfig, EXIT_CHECK_FAILED, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "vmbpo", version, about = "Variational model-based policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact EM on a finite MDP.
    Solve(Common),
    /// Sampled VMBPO or VMBPO-MFE, one run per seed.
    Train(Common),
    /// Invariant and oracle suites.
    Check(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let (command, args) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::Train(a) => ("train", a),
        Command::Check(a) => ("check", a),
    };
    let cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("vmbpo {command}: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let result = match command {
        "solve" => cmd_solve(&cfg, &args.out).map(|()| {
            println!("wrote {}", args.out.display());
            true
        }),
        "train" => cmd_train(&cfg, &args.seed, &args.out).map(|s| {
            for (seed, r) in s.seeds.iter().zip(&s.final_returns) {
                println!("seed {seed}: final return {r}");
            }
            println!("mean {} sd {}", s.mean, s.sd);
            true
        }),
        _ => cmd_check(&cfg, &args.seed, &args.out).map(|(report, ok)| {
            print!("{report}");
            ok
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED as u8),
        Err(e) => {
            eprintln!("vmbpo {command}: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
