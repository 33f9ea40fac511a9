//! Scenario runner and check suites behind the `forgetlab` binary.

pub mod checks;
pub mod config;
pub mod report;
pub mod scenarios;

use std::path::{Path, PathBuf};

use crate::error::Result;
use checks::{CheckContext, Mutation, Suite};
use config::{Overrides, Params};
use report::{ensure_dir, to_json, write_file, CheckReport};

/// What a scenario run produced.
#[derive(Debug)]
pub enum RunOutcome {
    Scenario { files: Vec<PathBuf> },
    Checks { report: CheckReport, files: Vec<PathBuf> },
}

/// Load, validate and run one scenario, writing `<kind>.csv` and
/// `<kind>.json` into its output directory.
pub fn run_scenario(path: &Path, ov: &Overrides) -> Result<RunOutcome> {
    let cfg = config::load(path, ov)?;
    if let Params::Check(p) = &cfg.params {
        let suite = Suite::parse(&p.suite)?;
        let mutation = p.mutate.as_deref().map(Mutation::parse).transpose()?;
        let report = run_check_suite(suite, &CheckContext::new(cfg.estimator.seed, mutation));
        let files = write_report(&report, &cfg.output_dir)?;
        return Ok(RunOutcome::Checks { report, files });
    }
    let out = scenarios::run(&cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let name = cfg.kind.name();
    let csv = cfg.output_dir.join(format!("{name}.csv"));
    let json = cfg.output_dir.join(format!("{name}.json"));
    write_file(&csv, &out.table.to_csv())?;
    write_file(&json, &to_json(&out.summary)?)?;
    Ok(RunOutcome::Scenario { files: vec![csv, json] })
}

pub fn run_check_suite(suite: Suite, ctx: &CheckContext) -> CheckReport {
    checks::run_suite(suite, ctx)
}

/// Write `check.json` and `check.csv`.
pub fn write_report(report: &CheckReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let json = dir.join("check.json");
    let csv = dir.join("check.csv");
    write_file(&json, &to_json(report)?)?;
    write_file(&csv, &report.to_table().to_csv())?;
    Ok(vec![json, csv])
}
