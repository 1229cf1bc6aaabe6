use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use saibench::pipeline::{
    self, read_json, read_repo, read_results, sibling, stage_plan, stage_rank, stage_run, to_json, write_results,
    write_text, FailuresFile, LeaderboardFile, PipelineError, PlanFile, RunConfig, ScheduleFile, SkipsFile,
    ARTIFACT_VERSION,
};
use saibench::pod::ClockMode;
use saibench::repo::scan;
use saibench::report::{curve_axes, emit_report, ReportInput};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "saibench", version, about = "Discover, run and rank benchmark scenarios from SAIL modules")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run seed, fixed at plan time.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Parallel pods; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Longest converter chain the planner may insert.
    #[arg(long = "max-chain", global = true, default_value_t = 3)]
    max_chain: usize,
    #[arg(long, global = true, default_value = "simulated", value_parser = parse_mode)]
    mode: ClockMode,
    /// `kind=glob`, repeatable.
    #[arg(long, global = true)]
    filter: Vec<String>,
    /// Primary output file; other artifacts of the stage go next to it.
    #[arg(short = 'o', global = true)]
    output: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ClockMode, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse every .sail file under the roots into repo.json.
    Scan {
        #[arg(default_value = "corpus")]
        roots: Vec<PathBuf>,
    },
    /// Discover feasible scenarios; writes plan.json, schedule.json and skips.json.
    Plan {
        #[arg(default_value = pipeline::REPO_FILE)]
        repo: PathBuf,
    },
    /// Run the scheduled scenarios; writes results.jsonl and failures.json.
    Run {
        #[arg(default_value = pipeline::PLAN_FILE)]
        plan: PathBuf,
    },
    /// Build leaderboards from results.jsonl.
    Rank {
        #[arg(default_value = pipeline::RESULTS_FILE)]
        results: PathBuf,
    },
    /// Render report.md and report.csv.
    Report {
        #[arg(default_value = pipeline::LEADERBOARD_FILE)]
        leaderboard: PathBuf,
    },
}

/// Exit status of a stage that ran to completion.
enum Outcome {
    Clean,
    Diagnostics,
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.output.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn config(cli: &Cli) -> RunConfig {
    let d = RunConfig::default();
    RunConfig {
        seed: cli.seed,
        jobs: cli.jobs.unwrap_or(d.jobs),
        max_chain: cli.max_chain,
        filters: cli.filter.clone(),
        mode: cli.mode,
        calibration: d.calibration,
    }
}

fn cmd_scan(cli: &Cli, roots: &[PathBuf]) -> Result<Outcome> {
    let repo = scan(roots)?;
    let out = out_path(cli, pipeline::REPO_FILE);
    write_text(&out, &repo.to_json())?;
    for d in repo.diagnostics.iter().chain(&repo.warnings) {
        eprintln!("{}:{}:{}: {}", d.path, d.line, d.col, d.message);
    }
    eprintln!("scanned {} modules into {}", repo.records.len(), out.display());
    Ok(if repo.diagnostics.is_empty() { Outcome::Clean } else { Outcome::Diagnostics })
}

fn cmd_plan(cli: &Cli, repo_path: &Path) -> Result<Outcome> {
    let repo = read_repo(repo_path)?;
    let out = stage_plan(&repo, &config(cli))?;
    let plan_path = out_path(cli, pipeline::PLAN_FILE);
    write_text(&plan_path, &to_json(&out.plan))?;
    write_text(&sibling(&plan_path, pipeline::SCHEDULE_FILE), &to_json(&out.schedule))?;
    write_text(&sibling(&plan_path, pipeline::SKIPS_FILE), &to_json(&out.skips))?;
    eprintln!(
        "{} scenarios from {} tuples ({} pruned, {} skip reasons), makespan {:.3} s",
        out.plan.scenarios.len(),
        out.plan.tuples,
        out.skips.pruned.len(),
        out.skips.skips.len(),
        out.schedule.schedule.makespan
    );
    Ok(Outcome::Clean)
}

fn cmd_run(cli: &Cli, plan_path: &Path) -> Result<Outcome> {
    let plan: PlanFile = read_json(plan_path)?;
    let sched: ScheduleFile = read_json(&sibling(plan_path, pipeline::SCHEDULE_FILE))?;
    let repo = read_repo(&sibling(plan_path, pipeline::REPO_FILE))?;
    let run = stage_run(&repo, &plan, &sched, &config(cli))?;
    let out = out_path(cli, pipeline::RESULTS_FILE);
    write_results(&out, &run.records)?;
    let failures = FailuresFile { v: ARTIFACT_VERSION, failures: run.failures };
    write_text(&sibling(&out, pipeline::FAILURES_FILE), &to_json(&failures))?;
    for f in &failures.failures {
        eprintln!("failed {} ({}): {}", f.label, f.sid, f.error);
    }
    eprintln!("{} records into {}", run.records.len(), out.display());
    Ok(if failures.failures.is_empty() { Outcome::Clean } else { Outcome::Diagnostics })
}

fn cmd_rank(cli: &Cli, results_path: &Path) -> Result<Outcome> {
    let records = read_results(results_path)?;
    let plan: PlanFile = read_json(&sibling(results_path, pipeline::PLAN_FILE))?;
    let repo = read_repo(&sibling(results_path, pipeline::REPO_FILE))?;
    let boards = stage_rank(&repo, &plan, &records)?;
    let out = out_path(cli, pipeline::LEADERBOARD_FILE);
    write_text(&out, &to_json(&boards))?;
    eprintln!("{} leaderboards into {}", boards.leaderboards.len(), out.display());
    Ok(Outcome::Clean)
}

fn cmd_report(cli: &Cli, lb_path: &Path) -> Result<Outcome> {
    let leaderboards: LeaderboardFile = read_json(lb_path)?;
    let records = read_results(&sibling(lb_path, pipeline::RESULTS_FILE))?;
    let plan: PlanFile = read_json(&sibling(lb_path, pipeline::PLAN_FILE))?;
    let skips: SkipsFile = read_json(&sibling(lb_path, pipeline::SKIPS_FILE))?;
    let repo = read_repo(&sibling(lb_path, pipeline::REPO_FILE))?;
    let failures = match read_json::<FailuresFile>(&sibling(lb_path, pipeline::FAILURES_FILE)) {
        Ok(f) => f.failures,
        Err(PipelineError::MissingArtifact(_)) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let (time_metric, loss_metric) = curve_axes(&repo);
    let report = emit_report(&ReportInput {
        plan: &plan,
        skips: &skips,
        records: &records,
        failures: &failures,
        leaderboards: &leaderboards,
        time_metric,
        loss_metric,
    });
    let out = out_path(cli, pipeline::REPORT_FILE);
    write_text(&out, &report.markdown)?;
    write_text(&sibling(&out, pipeline::CSV_FILE), &report.csv)?;
    eprintln!("report into {} ({} work–precision curves)", out.display(), report.curves);
    Ok(if report.empty { Outcome::Diagnostics } else { Outcome::Clean })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Scan { roots } => cmd_scan(&cli, roots),
        Cmd::Plan { repo } => cmd_plan(&cli, repo),
        Cmd::Run { plan } => cmd_run(&cli, plan).context("run failed"),
        Cmd::Rank { results } => cmd_rank(&cli, results),
        Cmd::Report { leaderboard } => cmd_report(&cli, leaderboard),
    };
    match result {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Diagnostics) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
