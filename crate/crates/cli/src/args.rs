use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dyngame", version, about = "Nash equilibria and receding-horizon control for linear-quadratic dynamic games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the standing assumptions of a scenario.
    Check(CheckArgs),
    /// Infinite-horizon open-loop Nash equilibrium and its cost-to-go.
    SolveOl(SolveOlArgs),
    /// Infinite-horizon closed-loop Nash equilibrium.
    SolveCl(SolveClArgs),
    /// One finite-horizon game from a given state.
    SolveFh(SolveFhArgs),
    /// Invariant terminal ellipsoid of an equilibrium closed loop.
    TerminalSet(TerminalSetArgs),
    /// Receding-horizon closed-loop simulation.
    Simulate(SimulateArgs),
    #[command(subcommand)]
    Experiment(Experiment),
    /// Regenerate a bundled data set.
    Reproduce(ReproduceArgs),
    /// Write the platooning scenario file.
    ExportScenario(ExportArgs),
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    /// Terminal-weight perturbation sweep.
    Perturb(PerturbArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Ol,
    Cl,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EquilibriumKind {
    Ol,
    Cl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Ol,
    Cl,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Riccati,
    Lyapunov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Platooning,
    Perturbation,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct IterArgs {
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Which family of assumptions decides the exit code.
    #[arg(long, value_enum, default_value_t = Which::All)]
    pub which: Which,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveOlArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub iter: IterArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveClArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[command(flatten)]
    pub iter: IterArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveFhArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Comma-separated initial state; defaults to the scenario's `x0`.
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long, value_enum, default_value_t = Kind::Ol)]
    pub kind: Kind,
    /// VI tolerance; defaults to the scenario's solver settings.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub enforce_terminal: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TerminalSetArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum, default_value_t = EquilibriumKind::Ol)]
    pub which: EquilibriumKind,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long, value_enum, default_value_t = Kind::Ol)]
    pub kind: Kind,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Recorded in the manifest; the simulation itself is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub enforce_terminal: bool,
    #[arg(long)]
    pub no_warm_start: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Comma-separated variances, as fractions of max|P_ol| unless `--absolute`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.05, 0.1])]
    pub variances: Vec<f64>,
    #[arg(long)]
    pub absolute: bool,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub figure: Figure,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, default_value_t = 4)]
    pub vehicles: usize,
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}
