//! `bdlo` — command-line front end for the branched deformable linear
//! object engine: simulation, parameter identification, residual
//! training, ablation evaluation, gradient checks, and micro-benchmarks.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 numeric
//! failure, 4 solver non-convergence.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use bdlo_sim::SimError;
use commands::{BenchArgs, EvaluateArgs, GradcheckArgs, IdentifyArgs, TrainArgs};

#[derive(Parser)]
#[command(
    name = "bdlo",
    about = "Differentiable dynamics for branched deformable linear objects",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the model under a motion script and write a dataset.
    Simulate {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit material parameters to a recorded trajectory.
    Identify {
        #[arg(long)]
        config: PathBuf,
        /// Recorded trajectory file.
        #[arg(long)]
        trajectory: PathBuf,
        /// Recorded grasp-target file.
        #[arg(long)]
        inputs: PathBuf,
        /// Where to write the fitted parameter file.
        #[arg(long)]
        out: PathBuf,
        /// Fit-window length in steps (defaults to the config horizon).
        #[arg(long)]
        horizon: Option<usize>,
        /// Cap on optimizer iterations.
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Also fit a per-branch mass scale.
        #[arg(long)]
        fit_mass: bool,
        /// Also fit a per-branch rotational-inertia scale.
        #[arg(long)]
        fit_inertia: bool,
    },
    /// Train the graph-convolution velocity corrector on a trajectory.
    TrainResidual {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Seed for the network's weight initialization.
        #[arg(long, default_value_t = 0)]
        net_seed: u64,
    },
    /// Roll the model out against a recorded trajectory and report RMSE;
    /// the --no-* flags ablate one pipeline stage each.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        /// Fitted parameter file (falls back to the config parameters).
        #[arg(long)]
        fitted_params: Option<PathBuf>,
        /// Trained residual checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Steps to evaluate (defaults to the config horizon).
        #[arg(long)]
        horizon: Option<usize>,
        /// Disable the inextensibility constraint.
        #[arg(long)]
        no_inext: bool,
        /// Disable branch-junction attachment.
        #[arg(long)]
        no_attach: bool,
        /// Disable junction orientation alignment.
        #[arg(long)]
        no_orient: bool,
        /// Disable the learned residual corrector.
        #[arg(long)]
        no_residual: bool,
        /// Ignore fitted parameters and use the config parameters.
        #[arg(long)]
        no_sysid: bool,
    },
    /// Verify closed-form gradients against finite differences.
    Gradcheck {
        /// Number of random rods to test.
        #[arg(long, default_value_t = 100)]
        rods: usize,
        /// Largest rod size to draw.
        #[arg(long, default_value_t = 8)]
        max_vertices: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Relative tolerance for the twist-angle gradient.
        #[arg(long, default_value_t = 1e-6)]
        theta_tolerance: f64,
        /// Relative tolerance for the vertex forces.
        #[arg(long, default_value_t = 1e-4)]
        force_tolerance: f64,
    },
    /// Time the stepping paths by child count and the twist solve by
    /// gradient mode; prints CSV.
    Bench {
        /// Largest number of child branches to time.
        #[arg(long, default_value_t = 8)]
        children_max: usize,
        /// Steps timed per child count.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Twist-solve repetitions per gradient mode.
        #[arg(long, default_value_t = 30)]
        repeats: usize,
        /// Also write the CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// `BDLO_WORKERS` pins the size of the worker pool used by the
/// finite-difference gradient in identification.
fn init_workers() {
    if let Ok(v) = std::env::var("BDLO_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config } => commands::simulate(&config),
        Command::Identify {
            config,
            trajectory,
            inputs,
            out,
            horizon,
            max_iterations,
            fit_mass,
            fit_inertia,
        } => commands::identify_cmd(
            &config,
            &IdentifyArgs {
                trajectory,
                inputs,
                out,
                horizon,
                max_iterations,
                fit_mass,
                fit_inertia,
            },
        ),
        Command::TrainResidual {
            config,
            trajectory,
            inputs,
            out,
            epochs,
            learning_rate,
            net_seed,
        } => commands::train_residual(
            &config,
            &TrainArgs {
                trajectory,
                inputs,
                out,
                epochs,
                learning_rate,
                net_seed,
            },
        ),
        Command::Evaluate {
            config,
            trajectory,
            inputs,
            fitted_params,
            checkpoint,
            horizon,
            no_inext,
            no_attach,
            no_orient,
            no_residual,
            no_sysid,
        } => commands::evaluate(
            &config,
            &EvaluateArgs {
                trajectory,
                inputs,
                fitted_params,
                checkpoint,
                horizon,
                no_inext,
                no_attach,
                no_orient,
                no_residual,
                no_sysid,
            },
        ),
        Command::Gradcheck {
            rods,
            max_vertices,
            seed,
            theta_tolerance,
            force_tolerance,
        } => commands::gradcheck(&GradcheckArgs {
            rods,
            max_vertices,
            seed,
            theta_tolerance,
            force_tolerance,
        }),
        Command::Bench {
            children_max,
            steps,
            repeats,
            csv,
        } => commands::bench(&BenchArgs {
            children_max,
            steps,
            repeats,
            csv,
        }),
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<SimError>() {
        Some(SimError::NonConvergence { .. }) => 4,
        Some(SimError::Numeric(_) | SimError::Geometry(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}

fn main() {
    init_workers();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
