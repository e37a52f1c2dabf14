use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use randpost::cli::{
    cmd_averaged, cmd_marginal, cmd_selftest, cmd_theorem_check, AveragedArgs, CommonArgs,
    FixSpec, MarginalArgs, Mode, SelftestArgs, TheoremArgs,
};
use randpost::experiments::SweepVariable;

/// Bayesian inversion with randomized forward maps: samplers, closed-form
/// posteriors and convergence-rate experiments.
#[derive(Parser)]
#[command(name = "randpost", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Marginal-posterior study: RWMH reference vs PMMH vs MCwM over a
    /// sweep of M, sigma or h. Writes marginal_<sweep>.csv and rates.json.
    Marginal(MarginalCli),
    /// Averaged-posterior study: mixture convergence in h, optional MwMC
    /// cross-check and contour grids. Writes averaged_h.csv,
    /// contour_grid_<h>.csv and rates.json.
    Averaged(AveragedCli),
    /// Hellinger scaling of the Monte Carlo posterior approximations in
    /// one dimension. Writes hellinger_rates.csv and rates.json.
    TheoremCheck(TheoremCli),
    /// Oracle-equivalence suite: quadrature against closed forms. Prints
    /// one PASS/FAIL line per check.
    Selftest(SelftestCli),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Paper,
    Ci,
}

impl From<ModeArg> for Mode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::Paper => Mode::Paper,
            ModeArg::Ci => Mode::Ci,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    #[value(name = "M")]
    M,
    Sigma,
    H,
}

impl From<SweepArg> for SweepVariable {
    fn from(value: SweepArg) -> Self {
        match value {
            SweepArg::M => SweepVariable::M,
            SweepArg::Sigma => SweepVariable::Sigma,
            SweepArg::H => SweepVariable::H,
        }
    }
}

#[derive(Args)]
struct CommonCli {
    /// TOML configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV and JSON files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Global seed; every stream of the run derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// paper: full-length chains; ci: tenfold shorter.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Worker threads (overrides RANDPOST_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

impl From<&CommonCli> for CommonArgs {
    fn from(c: &CommonCli) -> Self {
        CommonArgs {
            config: c.config.clone(),
            out: c.out.clone(),
            seed: c.seed,
            mode: c.mode.map(Mode::from),
            threads: c.threads,
        }
    }
}

#[derive(Args)]
struct MarginalCli {
    #[command(flatten)]
    common: CommonCli,
    /// Swept variable: M, sigma or h.
    #[arg(long, value_enum)]
    sweep: Option<SweepArg>,
}

#[derive(Args)]
struct AveragedCli {
    #[command(flatten)]
    common: CommonCli,
}

#[derive(Args)]
struct TheoremCli {
    #[command(flatten)]
    common: CommonCli,
    /// Pin one variable: "M=16" sweeps h only, "h=0.25" sweeps M only.
    #[arg(long)]
    fix: Option<String>,
}

#[derive(Args)]
struct SelftestCli {
    /// Print check names without running them.
    #[arg(long)]
    list: bool,
    /// Corrupt tolerances to exercise the failure path.
    #[arg(long, hide = true)]
    inject_failure: bool,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Marginal(args) => cmd_marginal(&MarginalArgs {
            common: (&args.common).into(),
            sweep: args.sweep.map(SweepVariable::from),
        })
        .map(|_| ExitCode::SUCCESS),
        Command::Averaged(args) => cmd_averaged(&AveragedArgs {
            common: (&args.common).into(),
        })
        .map(|_| ExitCode::SUCCESS),
        Command::TheoremCheck(args) => {
            let fix = match args.fix.as_deref().map(str::parse::<FixSpec>) {
                None => None,
                Some(Ok(f)) => Some(f),
                Some(Err(msg)) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(2);
                }
            };
            cmd_theorem_check(&TheoremArgs {
                common: (&args.common).into(),
                fix,
            })
            .map(|_| ExitCode::SUCCESS)
        }
        Command::Selftest(args) => cmd_selftest(&SelftestArgs {
            list: args.list,
            inject_failure: args.inject_failure,
        })
        .map(|all_passed| {
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
