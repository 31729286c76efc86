//! `brachiate`: solve, stabilize, simulate and benchmark swing behaviors of
//! the two-link brachiation robot.
//!
//! Exit codes: 0 on success, 1 when a solver or simulation fails
//! numerically, 2 for usage and configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "brachiate", version, about = "Brachiation robot trajectory optimization and control toolkit")]
struct Cli {
    /// TOML run config; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides BRACHIATE_OUT_DIR and the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for every random draw
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run repetitions on one thread
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve swing trajectories by direct collocation and write one CSV each
    Optimize {
        #[arg(long, num_args = 1.., required = true)]
        behavior: Vec<String>,
        /// Number of knots
        #[arg(long)]
        knots: Option<usize>,
        /// Weight on the final time
        #[arg(long)]
        time_weight: Option<f64>,
    },
    /// Compute TVLQR gain schedules along nominals
    Synthesize {
        #[arg(long, num_args = 1.., required = true)]
        behavior: Vec<String>,
    },
    /// Simulate a single swing or a behavior plan and write its trace
    Simulate {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = "TVLQR")]
        controller: String,
        #[command(flatten)]
        disturb: DisturbArgs,
        /// Draw the single-swing start state from its spread
        #[arg(long)]
        perturb: bool,
    },
    /// Compare controllers over seeded repetitions and write metrics tables
    Benchmark {
        #[command(flatten)]
        target: Target,
        #[arg(long, num_args = 1..)]
        controllers: Vec<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        disturb: DisturbArgs,
    },
    /// Fit the RL policy file by imitating TVLQR on the BF swing
    DistillPolicy,
    /// Identify joint damping from a recorded trajectory CSV
    Calibrate {
        #[arg(long)]
        recording: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Target {
    /// Single swing of this behavior
    #[arg(long)]
    behavior: Option<String>,
    /// Behavior plan TOML
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct DisturbArgs {
    /// Point mass (kg) at the swing-arm hook
    #[arg(long)]
    added_mass: Option<f64>,
    /// Shoulder velocity change (rad/s) at the first swing through vertical
    #[arg(long, allow_hyphen_values = true)]
    impulse: Option<f64>,
}

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<brachiation::Error> for Failure {
    fn from(e: brachiation::Error) -> Self {
        use brachiation::Error as E;
        match e {
            E::MaxIterations { .. }
            | E::Infeasible { .. }
            | E::RiccatiBlowup { .. }
            | E::NumericalDivergence { .. }
            | E::SingularMassMatrix
            | E::ReleaseTimeout(_)
            | E::PlanAborted { .. } => Failure::Numerical(e.to_string()),
            // A missing input is the caller's mistake; anything else went wrong on disk.
            E::Io { ref source, .. } if source.kind() != std::io::ErrorKind::NotFound => Failure::Numerical(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.sequential |= cli.sequential;
    let out = cfg.output_dir(cli.out.as_deref());
    match cli.command {
        Command::Optimize { behavior, knots, time_weight } => {
            cfg.knots = knots.or(cfg.knots);
            cfg.time_weight = time_weight.or(cfg.time_weight);
            cfg.validate()?;
            commands::optimize(&cfg, &out, &commands::parse_behaviors(&behavior)?)
        }
        Command::Synthesize { behavior } => {
            cfg.validate()?;
            commands::synthesize(&cfg, &out, &commands::parse_behaviors(&behavior)?)
        }
        Command::Simulate { target, controller, disturb, perturb } => {
            disturb.apply(&mut cfg);
            cfg.validate()?;
            let kind = controller.parse()?;
            commands::simulate(&cfg, &out, &target.resolve()?, kind, perturb)
        }
        Command::Benchmark { target, controllers, reps, disturb } => {
            disturb.apply(&mut cfg);
            if !controllers.is_empty() {
                cfg.controllers = controllers.iter().map(|c| c.parse()).collect::<Result<_, _>>()?;
            }
            cfg.repetitions = reps.unwrap_or(cfg.repetitions);
            cfg.validate()?;
            commands::benchmark(&cfg, &out, &target.resolve()?)
        }
        Command::DistillPolicy => {
            cfg.validate()?;
            commands::distill_policy(&cfg, &out)
        }
        Command::Calibrate { recording } => {
            cfg.validate()?;
            commands::calibrate(&cfg, &out, &recording)
        }
    }
}

impl DisturbArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        use brachiation::sim::Disturbance;
        if let Some(m) = self.added_mass {
            cfg.disturbances.retain(|d| !matches!(d, Disturbance::AddedMass { .. }));
            cfg.disturbances.push(Disturbance::swing_mass(m));
        }
        if let Some(delta) = self.impulse {
            cfg.disturbances.retain(|d| !matches!(d, Disturbance::VelocityImpulse { .. }));
            cfg.disturbances.push(Disturbance::VelocityImpulse { joint: 0, delta, time: None });
        }
    }
}

impl Target {
    fn resolve(self) -> Result<commands::Target, Failure> {
        match (self.behavior, self.plan) {
            (Some(b), None) => Ok(commands::Target::Swing(b.parse()?)),
            (None, Some(p)) => Ok(commands::Target::Plan(p)),
            _ => Err(Failure::Usage("give exactly one of --behavior or --plan".into())),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
