use clap::{Parser, Subcommand};
use geomint::cli::{self, Overrides};
use std::path::PathBuf;
use std::process::ExitCode;

/// Geometric integrators from lifted discretization maps: symplectic
/// methods for Hamiltonian systems and presymplectic methods for
/// optimal control problems.
#[derive(Parser)]
#[command(name = "geomint", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Problem file (INI-style; see the bundled problems/ directory).
    file: PathBuf,
    /// Directory for CSV output (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the step size from the file.
    #[arg(long)]
    h: Option<f64>,
    /// Override the number of steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the discretization parameter theta.
    #[arg(long)]
    theta: Option<f64>,
    /// Override the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the structural properties: discretization-map identities,
    /// lift symplectomorphism, Morse rank, regularity, tangency and the
    /// Lagrangian criteria.
    Check(CommonArgs),
    /// Integrate a Hamiltonian problem with the lifted-map method.
    Simulate(CommonArgs),
    /// Run the constraint algorithm and the presymplectic integrator.
    Ocp(CommonArgs),
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides { h: self.h, steps: self.steps, theta: self.theta, seed: self.seed }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match &args.command {
        Command::Check(common) => {
            match cli::cmd_check(&common.file, common.out.as_deref(), &common.overrides()) {
                Ok(0) => Ok(()),
                Ok(failed) => {
                    eprintln!("{failed} check(s) failed");
                    return ExitCode::from(1);
                }
                Err(e) => Err(e),
            }
        }
        Command::Simulate(common) => {
            cli::cmd_simulate(&common.file, common.out.as_deref(), &common.overrides())
        }
        Command::Ocp(common) => cli::cmd_ocp(&common.file, common.out.as_deref(), &common.overrides()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code_for(&e) as u8)
        }
    }
}
