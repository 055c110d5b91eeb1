use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pinn_cli::{
    cmd_augment, cmd_bench, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, load_config, CliResult,
    Overrides,
};

#[derive(Parser)]
#[command(name = "pinn", about = "Permutation-equivariant networks for wireless resource allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (also where inputs are looked up).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training-set size (for `augment`: the expanded size).
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Maximal number of users / links.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Benchmark target as a fraction of the WMMSE sum-rate.
    #[arg(long, global = true)]
    target: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.jsonl and test.jsonl.
    Gen,
    /// Train on train.jsonl, write model.json and trace.csv.
    Train,
    /// Evaluate model.json on test.jsonl, write metrics.csv.
    Eval,
    /// Expand train.jsonl by relabeling and time it against WMMSE.
    Augment,
    /// Compare backprop with finite differences.
    Gradcheck,
    /// Sample and compute complexity of PINN-2D against the dense baseline.
    Bench,
}

fn run(cli: Cli) -> CliResult<()> {
    let ov = Overrides { seed: cli.seed, out: cli.out, samples: cli.samples, k: cli.k, target: cli.target };
    let cfg = load_config(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::Gen => {
            let r = cmd_gen(&cfg)?;
            println!("wrote {} and {}", r.train.display(), r.test.display());
        }
        Command::Train => {
            let m = cmd_train(&cfg)?;
            println!("trained a {} model", m.kind());
        }
        Command::Eval => {
            for (k, v) in cmd_eval(&cfg)? {
                println!("{k}: {v}");
            }
        }
        Command::Augment => {
            let r = cmd_augment(&cfg)?;
            for t in &r.timing {
                println!("{}: {} samples in {:.3}s", t.method, t.samples, t.seconds);
            }
            println!("speedup {:.1}x", r.speedup());
        }
        Command::Gradcheck => {
            for r in cmd_gradcheck(&cfg)? {
                println!("{}: {} cases, max relative error {:e}", r.family, r.cases, r.max_relative_error);
            }
        }
        Command::Bench => {
            let r = cmd_bench(&cfg)?;
            for s in &r.summary {
                match s.min_size {
                    Some(n) => println!("{}: target reached with {n} samples", s.model),
                    None => println!("{}: target not reached up to {} samples", s.model, s.largest_size),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
