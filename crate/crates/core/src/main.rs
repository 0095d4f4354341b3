use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdpf::harness::selftest;
use cdpf::harness::{cmd_filter, cmd_kl, cmd_simulate, ExperimentConfig, HarnessError, Overrides, Report};

#[derive(Parser, Debug)]
#[command(name = "cdpf", version, about = "Continuous-discrete particle filtering for SDE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate ground truth and measurements.
    Simulate(Common),
    /// Run a particle filter over a measurement file.
    Filter(Common),
    /// Monte Carlo KL divergence between two drifts.
    Kl(Common),
    /// Run the built-in oracle checks.
    Selftest(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of particles.
    #[arg(long)]
    particles: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 uses all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::from_toml("[model]\nkind = \"pendulum\"\n")?,
        };
        base.resolve(&Overrides {
            seed: self.seed,
            particles: self.particles,
            out: self.out.clone(),
        })
    }
}

fn print_report(report: &Report) {
    for line in &report.lines {
        println!("{line}");
    }
    for file in &report.files {
        println!("wrote {}", file.display());
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Simulate(c) => print_report(&cmd_simulate(&c.config()?)?),
        Command::Filter(c) => print_report(&cmd_filter(&c.config()?)?),
        Command::Kl(c) => print_report(&cmd_kl(&c.config()?)?),
        Command::Selftest(_) => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(HarnessError::Core(cdpf::Error::InvalidWeights(format!(
                    "{failed} selftest check(s) failed"
                ))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Simulate(c) | Command::Filter(c) | Command::Kl(c) | Command::Selftest(c) => c.threads,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(hint) = e.hint() {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
