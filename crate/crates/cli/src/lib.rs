//! Command-line driver: simulate a setup, train and simplify a model, compensate
//! images and compare against the two-step baselines.

pub mod commands;
pub mod config;
pub mod output;
pub mod protocol;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub use commands::*;

#[derive(Parser, Debug)]
#[command(name = "procam", version, about = "Learned projector compensation on a simulated projector-camera pair")]
pub struct Cli {
    /// Worker threads; defaults to PROCAM_THREADS or all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a projector-camera setup and capture a dataset.
    Simulate(SimulateArgs),
    /// Train the full model on a captured dataset.
    Train(TrainArgs),
    /// Collapse a trained model into its deployable form.
    Simplify(SimplifyArgs),
    /// Compute the projector input for a desired image.
    Compensate(CompensateArgs),
    /// Score models and baselines on a dataset's validation split.
    Evaluate(EvaluateArgs),
    /// Finite-difference checks of every differentiable stage.
    Gradcheck(GradcheckArgs),
    /// Run the structured-light two-step methods.
    Baseline(BaselineArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    output::init_threads(cli.threads)?;
    match &cli.command {
        Command::Simulate(a) => {
            println!("{}", simulate(a)?.display());
        }
        Command::Train(a) => {
            let o = train(a)?;
            let m = o.summary.report.last.metrics;
            println!("{}  PSNR {:.3}  RMSE {:.4}  SSIM {:.4}", o.dir.display(), m.psnr, m.rmse, m.ssim);
        }
        Command::Simplify(a) => {
            let o = simplify(a)?;
            println!(
                "{}  residual {:.2e}  speedup {:.2}x",
                o.dir.display(),
                o.summary.residuals.photometric,
                o.summary.speedup
            );
        }
        Command::Compensate(a) => {
            let o = compensate(a)?;
            println!("{}", o.dir.display());
            for r in &o.rows {
                println!("{:<14} PSNR {:.3}  RMSE {:.4}  SSIM {:.4}", r.method, r.psnr, r.rmse, r.ssim);
            }
        }
        Command::Evaluate(a) => {
            let o = evaluate(a)?;
            println!("{}", o.dir.display());
            for r in &o.rows {
                println!("{:<28} {:>5}  PSNR {:>7.3}  RMSE {:.4}  SSIM {:.4}", r.method, r.train, r.psnr, r.rmse, r.ssim);
            }
        }
        Command::Gradcheck(a) => {
            gradcheck(a)?;
        }
        Command::Baseline(a) => {
            let (dir, rows) = baseline(a)?;
            println!("{}", dir.display());
            for r in &rows {
                println!("{:<20} PSNR {:.3}  RMSE {:.4}  SSIM {:.4}", r.method, r.psnr, r.rmse, r.ssim);
            }
        }
    }
    Ok(())
}
