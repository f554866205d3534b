use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use obswave::harness::{run, Command, RunOptions};
use obswave::manifest::verify_manifest;
use obswave::plotdata::{emit_plotdata, PlotKind};

#[derive(Parser)]
#[command(name = "obswave", version, about = "Stochastic wave equation laboratory: simulation, observability checks and initial-data reconstruction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `task.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `ensemble.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Certify the weight function and the time horizon, list the observed boundary.
    CheckGeometry(Common),
    /// Integrate an ensemble and export one trajectory.
    Solve(Common),
    /// Write boundary or internal observation traces of one path.
    Observe(Common),
    /// Check the pointwise identities, the B lower bound and its lambda threshold.
    VerifyIdentity(Common),
    /// Check the energy estimate and hidden regularity over an ensemble.
    VerifyEnergy(Common),
    /// Estimate observability constants over data and noise ensembles.
    VerifyObservability(Common),
    /// Recover initial data from observations.
    Reconstruct(Common),
    /// Estimate the stability constant over pairs of initial data.
    StabilityProbe(Common),
    /// Convert an artifact CSV into long format for plotting.
    Plotdata {
        #[arg(long)]
        artifact: PathBuf,
        /// energy | residual | objective | constant
        #[arg(long)]
        kind: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-hash the artifacts listed in a run manifest.
    VerifyManifest {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.cmd {
        Cmd::CheckGeometry(c) => (Command::CheckGeometry, c),
        Cmd::Solve(c) => (Command::Solve, c),
        Cmd::Observe(c) => (Command::Observe, c),
        Cmd::VerifyIdentity(c) => (Command::VerifyIdentity, c),
        Cmd::VerifyEnergy(c) => (Command::VerifyEnergy, c),
        Cmd::VerifyObservability(c) => (Command::VerifyObservability, c),
        Cmd::Reconstruct(c) => (Command::Reconstruct, c),
        Cmd::StabilityProbe(c) => (Command::StabilityProbe, c),
        Cmd::Plotdata { artifact, kind, out } => {
            let res = kind.parse::<PlotKind>().and_then(|k| emit_plotdata(&artifact, k)).and_then(|text| match out {
                Some(p) => std::fs::write(p, text).map_err(Into::into),
                None => {
                    print!("{text}");
                    Ok(())
                }
            });
            return match res {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
        Cmd::VerifyManifest { dir } => {
            return match verify_manifest(&dir) {
                Ok(bad) if bad.is_empty() => {
                    println!("manifest ok");
                    ExitCode::SUCCESS
                }
                Ok(bad) => {
                    for b in bad {
                        eprintln!("mismatch: {b}");
                    }
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
    };
    let opts = RunOptions { config: common.config, out: common.out, seed: common.seed };
    match run(cmd, &opts) {
        Ok(o) => {
            print!("{}", o.summary);
            for f in &o.failures {
                eprintln!("FAILED: {f}");
            }
            if o.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
