use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use trajdistill::lab::{cmd_ablate, cmd_compare, cmd_distill, cmd_train, cmd_verify, LabConfig};
use trajdistill::{ddim_delta, Error};

#[derive(Parser)]
#[command(
    name = "trajdistill",
    version,
    about = "Trajectory-aligned score distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the toy noise-prediction network and write a checkpoint.
    Train(Common),
    /// Optimize a particle set against the configured denoiser.
    Distill(Common),
    /// Sweep farthest timestep and step size at a fixed call budget.
    Ablate(Common),
    /// Check the closed-form identities and invariants.
    Verify(Common),
    /// Run every method at the same denoiser-call budget.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl Common {
    fn resolve(&self) -> trajdistill::Result<LabConfig> {
        let mut cfg = match &self.config {
            Some(path) => LabConfig::load(path)?,
            None => LabConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Train(c)
        | Command::Distill(c)
        | Command::Ablate(c)
        | Command::Verify(c)
        | Command::Compare(c) => c,
    };
    let cfg = common.resolve()?;
    if common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    match cli.command {
        Command::Train(_) => {
            let out = cmd_train(&cfg).context("train")?;
            println!(
                "checkpoint {}  loss {:.5} -> {:.5}  oracle {:.5}  ratio {:.4}",
                out.checkpoint.display(),
                out.initial_loss,
                out.final_loss,
                out.oracle_loss,
                out.final_loss / out.oracle_loss
            );
        }
        Command::Distill(_) => {
            let dir = cmd_distill(&cfg).context("distill")?;
            println!("{} run written to {}", cfg.distill.method, dir.display());
        }
        Command::Ablate(_) => {
            let out = cmd_ablate(&cfg).context("ablate")?;
            println!("farthest  step  n  median_sw  poor");
            for g in &out.grid {
                println!(
                    "{:>8}  {:>4}  {:>2}  {:.4}     {}",
                    g.farthest, g.step_size, g.steps, g.median_sliced_wasserstein, g.poor
                );
            }
            println!("grid written to {}", out.dir.display());
        }
        Command::Compare(_) => {
            let out = cmd_compare(&cfg).context("compare")?;
            println!("method      seed  calls  sliced_w  modes");
            for r in &out.finals {
                println!(
                    "{:<10}  {:>4}  {:>5}  {:.4}    {}",
                    r.label, r.seed, r.calls, r.sliced_wasserstein, r.modes_covered
                );
            }
            println!("curves written to {}", out.dir.display());
        }
        Command::Verify(_) => {
            let report = cmd_verify(&cfg, ddim_delta).context("verify")?;
            for c in &report.checks {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                println!(
                    "{mark} {:<24} {:.3e} (tol {:.0e})",
                    c.name, c.max_residual, c.tolerance
                );
            }
            if !report.passed() {
                let failed: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name.as_str())
                    .collect();
                return Err(
                    Error::Numeric(format!("verification failed: {}", failed.join(", "))).into(),
                );
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) => e.exit_code() as u8,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
