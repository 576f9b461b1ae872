use std::path::PathBuf;
use std::process::ExitCode;

use augpd_cli::{parse_scenario, resolve_out_dir, run_scenario, RunOptions, ScenarioReport, Status};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "augpd", version, about = "Simulate and verify augmented primal-dual dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every run of a scenario and write CSV trajectories and JSON reports.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: the scenario's `output`, else out/<name>).
        #[arg(long, env = "AUGPD_OUT")]
        out: Option<PathBuf>,
    },
    /// Run only the verifier suites and print their verdicts; writes no files.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
}

fn print(report: &ScenarioReport) {
    for run in &report.runs {
        for c in &run.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::NotApplicable => "SKIP",
            };
            println!("{tag} {}/{}: {}", run.label, c.name, c.detail);
        }
    }
    if let Some(cmp) = &report.comparison {
        for c in &cmp.checks {
            let tag = if c.status == Status::Fail { "FAIL" } else { "PASS" };
            println!("{tag} comparison/{}: {}", c.name, c.detail);
        }
    }
    println!("{}: {}", report.name, if report.passed { "all checks passed" } else { "checks failed" });
}

fn execute(cli: Cli) -> augpd_cli::Result<bool> {
    let (common, out) = match cli.command {
        Command::Run { common, out } => (common, Some(out)),
        Command::Verify { common } => (common, None),
    };
    let mut scenario = parse_scenario(&common.scenario)?;
    scenario.override_with(common.seed, common.dt, common.t_end)?;
    let out_dir = out.map(|o| resolve_out_dir(o, &scenario));
    let report = run_scenario(&scenario, &RunOptions { out_dir: out_dir.clone() })?;
    print(&report);
    if let Some(dir) = out_dir {
        println!("wrote {}", dir.display());
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}
