//! Command-line harness: `run` a seeded experiment, `compare` policies over
//! a shared setup, `diagnose` the verification suites, `gen-fixtures` for
//! test data. Exit codes: 0 success, 1 config error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nccl_cli::config::RunConfig;
use nccl_cli::error::{CliError, Result};
use nccl_cli::output::{fmt_f, write_atomic};
use nccl_cli::runner::{self, resolve_out_dir};
use nccl_cli::{diagnose, fixtures};

#[derive(Parser)]
#[command(name = "nccl", version, about = "Continual-learning experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment config over its seeds.
    Run(RunArgs),
    /// Run several configs sharing dataset and seeds; emit a comparison table.
    Compare(CompareArgs),
    /// Run the statistical/exactness verification suites standalone.
    Diagnose(DiagnoseArgs),
    /// Write IDX/CSV test fixtures.
    GenFixtures(GenFixturesArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file (key = value lines); defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Policy override: finetune | er_fixed | agem | nccl | nccl_betamax.
    #[arg(long)]
    policy: Option<String>,
    /// Base step-size override.
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated seed list override.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generic `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// Config files to compare (two or more, sharing dataset/seeds).
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Output directory for the comparison table and sub-runs.
    #[arg(long, default_value = "out/compare")]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Master seed for every suite.
    #[arg(long, default_value_t = 777)]
    seed: u64,
    /// Output directory for reports.
    #[arg(long, default_value = "out/diagnose")]
    out: PathBuf,
}

#[derive(Args)]
struct GenFixturesArgs {
    /// Target directory.
    #[arg(long, default_value = "fixtures")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn load_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.policy {
        cfg.apply("policy.name", p)?;
    }
    if let Some(a) = args.alpha {
        cfg.apply("policy.alpha", &a.to_string())?;
    }
    if let Some(s) = &args.seeds {
        cfg.apply("run.seeds", s)?;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load_run_config(&args)?;
    let summary = runner::run_experiment(&cfg)?;
    println!(
        "wrote {} ({} seeds ok, {} failed)",
        summary.out_dir.display(),
        summary.outcomes.len(),
        summary.failures.len()
    );
    let acc: Vec<f64> = summary.outcomes.iter().map(|o| o.avg_accuracy).collect();
    let (m, s) = runner::RunSummary::mean_std(&acc);
    println!("average accuracy: {} +- {}", fmt_f(m), fmt_f(s));
    let fgt: Vec<f64> = summary.outcomes.iter().filter_map(|o| o.forgetting).collect();
    if fgt.len() == summary.outcomes.len() && !fgt.is_empty() {
        let (m, s) = runner::RunSummary::mean_std(&fgt);
        println!("forgetting:       {} +- {}", fmt_f(m), fmt_f(s));
    } else {
        println!("forgetting:       undefined (single task)");
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let mut cfgs = Vec::new();
    for path in &args.configs {
        let cfg = RunConfig::from_file(path)?;
        cfg.validate()?;
        cfgs.push(cfg);
    }
    let out = resolve_out_dir(&args.out);
    let table = runner::compare_policies(&cfgs, &out)?;
    print!("{table}");
    println!("wrote {}", out.join("comparison.csv").display());
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let out = resolve_out_dir(&args.out);
    let suites = diagnose::run_all(args.seed)?;
    let mut report = String::new();
    let mut all_ok = true;
    for s in &suites {
        println!(
            "{}: {}",
            s.name,
            if s.passed { "pass" } else { "FAIL" }
        );
        report.push_str(&s.report);
        report.push('\n');
        write_atomic(&out.join(format!("{}.csv", s.name)), &s.csv)?;
        all_ok &= s.passed;
    }
    write_atomic(&out.join("diagnose_report.txt"), &report)?;
    println!("wrote {}", out.join("diagnose_report.txt").display());
    if !all_ok {
        return Err(CliError::Runtime("one or more verification suites failed".into()));
    }
    Ok(())
}

fn cmd_gen_fixtures(args: GenFixturesArgs) -> Result<()> {
    let out = resolve_out_dir(&args.out);
    for path in fixtures::gen_fixtures(&out, args.seed)? {
        println!("wrote {path}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::Diagnose(args) => cmd_diagnose(args),
        Cmd::GenFixtures(args) => cmd_gen_fixtures(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
