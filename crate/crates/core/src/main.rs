use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forgetlab::cli::checks::{CheckContext, Mutation, Suite};
use forgetlab::cli::config::Overrides;
use forgetlab::cli::report::{format_f64, CheckReport, Status};
use forgetlab::cli::{run_check_suite, run_scenario, write_report, RunOutcome};
use forgetlab::{Error, EstimatorConfig};

#[derive(Parser)]
#[command(
    name = "forgetlab",
    version,
    about = "Forgetting in mixture-model post-training: scenarios and checks"
)]
struct Cli {
    /// Override the estimator seed.
    #[arg(long, global = true, env = "FORGETLAB_SEED")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true, env = "FORGETLAB_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config and write its CSV and JSON outputs.
    Run { config: PathBuf },
    /// Run a check suite: all, core, near_on_policy or extensions.
    Check {
        #[arg(default_value = "all")]
        suite: String,
        /// Inject a known fault (sft-gradient-sign).
        #[arg(long)]
        mutate: Option<String>,
    },
    /// Print the version.
    Version,
}

fn print_report(report: &CheckReport) {
    for c in &report.checks {
        let status = match c.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Error => "ERROR",
        };
        println!(
            "{status:<5} {:<34} {:<28} measured={} tol={} ({} ms)",
            c.name,
            c.paper_ref,
            format_f64(c.measured),
            format_f64(c.tolerance),
            c.runtime_ms
        );
    }
    let passed = report.checks.iter().filter(|c| c.status == Status::Pass).count();
    println!("{passed}/{} checks passed", report.checks.len());
}

fn execute(cli: Cli) -> Result<bool, Error> {
    let ov = Overrides {
        seed: cli.seed,
        output_dir: cli.output_dir.clone(),
    };
    match cli.command {
        Command::Run { config } => match run_scenario(&config, &ov)? {
            RunOutcome::Scenario { files } => {
                for f in files {
                    println!("wrote {}", f.display());
                }
                Ok(true)
            }
            RunOutcome::Checks { report, files } => {
                print_report(&report);
                for f in files {
                    println!("wrote {}", f.display());
                }
                Ok(report.all_passed())
            }
        },
        Command::Check { suite, mutate } => {
            let suite = Suite::parse(&suite)?;
            let mutation = mutate.as_deref().map(Mutation::parse).transpose()?;
            let seed = cli.seed.unwrap_or(EstimatorConfig::default().seed);
            let report = run_check_suite(suite, &CheckContext::new(seed, mutation));
            print_report(&report);
            let dir = cli.output_dir.unwrap_or_else(|| PathBuf::from("."));
            for f in write_report(&report, &dir)? {
                println!("wrote {}", f.display());
            }
            Ok(report.all_passed())
        }
        Command::Version => {
            println!("forgetlab {}", env!("CARGO_PKG_VERSION"));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
