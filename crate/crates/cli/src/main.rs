//! Command-line harness: run experiments, sweep the safety threshold,
//! verify theory checks on logged runs and summarize results.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use salnx::benchmarks::SyntheticSystem;
use salnx::config::{ExperimentConfig, Strategy};
use salnx::learner::{
    derive_seed, log_header, run_experiment_with_observer, SafetyBudget, STREAM_ADAPTER,
};
use salnx::log::ExperimentLog;
use salnx::metrics::unsafe_fraction;
use salnx::theory::theory_report;
use salnx::Error;

#[derive(Parser)]
#[command(
    name = "salnx",
    about = "Safe active learning for time-series Gaussian-process models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment, one log per seed.
    Run(RunArgs),
    /// Replicate the safety-threshold sweep: an alpha grid over fixed seeds.
    SweepAlpha(SweepArgs),
    /// Run the theory checks on a logged run.
    Theory(TheoryArgs),
    /// Summarize logged runs and emit plot-ready series.
    Report(ReportArgs),
    /// Print a baseline config for a benchmark (TOML).
    InitConfig(InitConfigArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override: run this master seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the trajectory-selection strategy.
    #[arg(long)]
    strategy: Option<String>,
    /// Override the safety threshold alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override with a failure budget "DELTA:N" (alpha = DELTA / N).
    #[arg(long)]
    budget: Option<String>,
    /// Output directory for JSONL and CSV logs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Disable observation noise in the benchmark system.
    #[arg(long)]
    noiseless: bool,
    /// Run the theory checks on each completed log.
    #[arg(long)]
    theory: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated safety thresholds.
    #[arg(long, default_value = "0.01,0.1,0.3,0.6")]
    alphas: String,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// A JSONL log produced by `run`.
    #[arg(long)]
    log: PathBuf,
    /// Emit the full report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// JSONL logs to summarize.
    #[arg(long, num_args = 1.., required = true)]
    log: Vec<PathBuf>,
    /// Directory for plot-ready per-iteration series (CSV per log).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitConfigArgs {
    /// Benchmark id: exp1 or exp2.
    #[arg(long, default_value = "exp2")]
    benchmark: String,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_budget(text: &str) -> Result<SafetyBudget, Error> {
    let (delta, n) = text
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("budget must look like DELTA:N, got '{text}'")))?;
    Ok(SafetyBudget {
        delta: delta
            .parse()
            .map_err(|e| Error::Config(format!("bad budget delta '{delta}': {e}")))?,
        n_planned: n
            .parse()
            .map_err(|e| Error::Config(format!("bad budget count '{n}': {e}")))?,
    })
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse::<Strategy>()?;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = Some(a);
        cfg.budget = None;
    }
    if let Some(b) = &args.budget {
        cfg.budget = Some(parse_budget(b)?);
        cfg.alpha = None;
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if args.noiseless {
        cfg.noiseless = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_basename(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("run_{}_{}_seed{}", cfg.benchmark, cfg.strategy.name(), seed)
}

/// Run one seed, streaming records to the JSONL file so a partial log
/// survives an adapter failure; the CSV is written on completion.
fn run_one(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<ExperimentLog, Error> {
    fs::create_dir_all(out_dir)?;
    let base = out_dir.join(log_basename(cfg, seed));
    let jsonl_path = base.with_extension("jsonl");
    let file = fs::File::create(&jsonl_path)?;
    let mut writer = BufWriter::new(file);

    let mut system =
        SyntheticSystem::by_name(&cfg.benchmark, derive_seed(seed, STREAM_ADAPTER, 0))?;
    system.set_noiseless(cfg.noiseless);

    // Header first, then one line per record as it is produced, so the file
    // is a readable (if partial) log at every moment.
    let header = log_header(&system, cfg, seed);
    if let Ok(line) = serde_json::to_string(&header) {
        let _ = writeln!(writer, "{line}");
        let _ = writer.flush();
    }
    let result = run_experiment_with_observer(&mut system, cfg, seed, &mut |rec| {
        if let Ok(line) = serde_json::to_string(rec) {
            let _ = writeln!(writer, "{line}");
            let _ = writer.flush();
        }
    });

    match result {
        Ok(log) => {
            // Rewrite the completed log: initialization records gain their
            // theory terms only after the first model fit, so the streamed
            // copy is not the final one.
            drop(writer);
            let mut w = BufWriter::new(fs::File::create(&jsonl_path)?);
            log.write_jsonl(&mut w)?;
            w.flush()?;
            let csv_file = fs::File::create(base.with_extension("csv"))?;
            let mut cw = BufWriter::new(csv_file);
            log.write_csv(&mut cw)?;
            cw.flush()?;
            Ok(log)
        }
        Err(e) => {
            let _ = writer.flush();
            eprintln!(
                "run aborted ({e}); partial records kept at {}",
                jsonl_path.display()
            );
            Err(e)
        }
    }
}

fn summarize(log: &ExperimentLog, seed: u64) -> String {
    let last = log.records.last();
    format!(
        "seed {seed}: {} exploration iterations, unsafe fraction {:.4}, final RMSE {}, final coverage {}",
        log.explore_records().count(),
        unsafe_fraction(log),
        last.and_then(|r| r.rmse)
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into()),
        last.and_then(|r| r.coverage)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into()),
    )
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let cfg = load_config(&args)?;
    let seeds = cfg.seeds.clone();
    println!(
        "running {} on {} with strategy {}, alpha {:.6}, {} seed(s)",
        cfg.n_iterations,
        cfg.benchmark,
        cfg.strategy.name(),
        cfg.resolve_alpha()?,
        seeds.len()
    );
    let results: Vec<(u64, Result<ExperimentLog, Error>)> = seeds
        .par_iter()
        .map(|seed| (*seed, run_one(&cfg, *seed, &args.out)))
        .collect();
    let mut failed = false;
    for (seed, result) in results {
        match result {
            Ok(log) => {
                println!("{}", summarize(&log, seed));
                if args.theory {
                    match theory_report(&log) {
                        Ok(report) => {
                            for c in &report.checks {
                                println!(
                                    "  theory {}: {} ({})",
                                    c.name,
                                    if c.pass { "PASS" } else { "FAIL" },
                                    c.detail
                                );
                                failed |= !c.pass;
                            }
                        }
                        Err(e) => {
                            println!("  theory checks unavailable: {e}");
                        }
                    }
                }
            }
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                failed = true;
            }
        }
    }
    if failed {
        Err(Error::state("one or more runs failed"))
    } else {
        Ok(())
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if args.noiseless {
        cfg.noiseless = true;
    }
    let alphas: Vec<f64> = args
        .alphas
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad alpha '{s}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    let seeds = cfg.seeds.clone();
    fs::create_dir_all(&args.out)?;

    let mut grid: Vec<(f64, u64)> = Vec::new();
    for a in &alphas {
        for s in &seeds {
            grid.push((*a, *s));
        }
    }
    let rows: Vec<(f64, u64, Result<ExperimentLog, Error>)> = grid
        .par_iter()
        .map(|(alpha, seed)| {
            let mut c = cfg.clone();
            c.alpha = Some(*alpha);
            c.budget = None;
            let dir = args.out.join(format!("alpha{alpha}"));
            (*alpha, *seed, run_one(&c, *seed, &dir))
        })
        .collect();

    let agg_path = args.out.join("sweep_summary.csv");
    let mut agg = BufWriter::new(fs::File::create(&agg_path)?);
    writeln!(agg, "alpha,seed,unsafe_fraction,final_rmse,final_coverage")?;
    for (alpha, seed, result) in rows {
        let log = result?;
        let last = log.records.last();
        writeln!(
            agg,
            "{},{},{},{},{}",
            alpha,
            seed,
            unsafe_fraction(&log),
            last.and_then(|r| r.rmse)
                .map(|v| v.to_string())
                .unwrap_or_default(),
            last.and_then(|r| r.coverage)
                .map(|v| v.to_string())
                .unwrap_or_default()
        )?;
    }
    agg.flush()?;
    println!("sweep summary written to {}", agg_path.display());
    Ok(())
}

fn cmd_theory(args: TheoryArgs) -> Result<bool, Error> {
    let file = fs::File::open(&args.log)?;
    let mut reader = std::io::BufReader::new(file);
    let log = ExperimentLog::read_jsonl(&mut reader)?;
    let report = theory_report(&log)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Error::state(e.to_string()))?
        );
    } else {
        for c in &report.checks {
            println!(
                "{}: {} ({})",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.detail
            );
        }
    }
    Ok(report.all_pass())
}

fn cmd_report(args: ReportArgs) -> Result<(), Error> {
    println!(
        "log,benchmark,strategy,alpha,seed,iterations,unsafe_fraction,final_rmse,final_coverage"
    );
    for path in &args.log {
        let file = fs::File::open(path)?;
        let mut reader = std::io::BufReader::new(file);
        let log = ExperimentLog::read_jsonl(&mut reader)?;
        let cfg = &log.header.config;
        let last = log.records.last();
        println!(
            "{},{},{},{},{},{},{},{},{}",
            path.display(),
            cfg.benchmark,
            cfg.strategy.name(),
            cfg.resolve_alpha()?,
            log.header.master_seed,
            log.explore_records().count(),
            unsafe_fraction(&log),
            last.and_then(|r| r.rmse)
                .map(|v| v.to_string())
                .unwrap_or_default(),
            last.and_then(|r| r.coverage)
                .map(|v| v.to_string())
                .unwrap_or_default()
        );
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "log".into());
            let series_path = dir.join(format!("{stem}_series.csv"));
            let mut w = BufWriter::new(fs::File::create(&series_path)?);
            writeln!(
                w,
                "iter,phase,criterion,xi_hat,unsafe,det_sigma,rmse,coverage"
            )?;
            for r in &log.records {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    r.iter,
                    match r.phase {
                        salnx::log::Phase::Init => "init",
                        salnx::log::Phase::Explore => "explore",
                    },
                    r.criterion.map(|v| v.to_string()).unwrap_or_default(),
                    r.xi.as_ref()
                        .map(|x| x.p_hat.to_string())
                        .unwrap_or_default(),
                    if r.unsafe_flag { 1 } else { 0 },
                    r.det_sigma.map(|v| v.to_string()).unwrap_or_default(),
                    r.rmse.map(|v| v.to_string()).unwrap_or_default(),
                    r.coverage.map(|v| v.to_string()).unwrap_or_default(),
                )?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_init_config(args: InitConfigArgs) -> Result<(), Error> {
    let cfg = ExperimentConfig::for_benchmark(&args.benchmark)?;
    let text = cfg.to_toml()?;
    match &args.out {
        Some(path) => {
            fs::write(path, &text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args).map(|_| true),
        Command::SweepAlpha(args) => cmd_sweep(args).map(|_| true),
        Command::Theory(args) => cmd_theory(args),
        Command::Report(args) => cmd_report(args).map(|_| true),
        Command::InitConfig(args) => cmd_init_config(args).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
