use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use marginlab::orchestrator::{Experiment, ExperimentSummary, RunManifest, RunOptions, VerifyOptions};
use marginlab::Error;

#[derive(Parser)]
#[command(name = "marginlab", version, about = "Exact input-space margins of ReLU MLPs trained on clean and corrupted data")]
struct Cli {
    /// Experiment manifest (TOML).
    #[arg(long, global = true, default_value = "manifest.toml")]
    manifest: PathBuf,
    /// Worker threads for training and margin jobs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Continue an experiment directory that already holds margin results.
    #[arg(long, global = true)]
    resume: bool,
    /// Override the manifest's sample-selection seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the manifest's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stop after this many margin jobs (fault injection for resume tests).
    #[arg(long, global = true, hide = true)]
    abort_after_jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset and split off the validation set.
    Ingest,
    /// Write the corrupted training set of every variant.
    Corrupt,
    /// Train every (variant, capacity, seed) model.
    Train,
    /// Nearest different-label distances before and after corruption.
    Maxmargins,
    /// Solve margins for the selected samples of every model.
    Margins,
    /// Write reports (runs any stage that is not done yet).
    Report,
    /// The full pipeline.
    Run,
    /// Audit a finished experiment against independent recomputation.
    Verify {
        #[arg(long, default_value_t = 2)]
        samples_per_cell: usize,
        #[arg(long, default_value_t = 10)]
        gradient_probes: usize,
        #[arg(long, default_value_t = 10)]
        maxmargin_queries: usize,
    },
}

fn open(cli: &Cli) -> marginlab::Result<Experiment> {
    let mut manifest = RunManifest::load(&cli.manifest)?;
    if let Some(seed) = cli.seed {
        manifest.seed = seed;
    }
    if let Some(out) = &cli.out {
        manifest.output_dir = std::env::current_dir().map_err(|e| Error::Io { path: ".".into(), source: e })?.join(out);
    }
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Experiment::open(
        manifest,
        RunOptions {
            workers,
            resume: cli.resume,
            abort_after_jobs: cli.abort_after_jobs,
        },
    )
}

fn print_summary(s: &ExperimentSummary) {
    println!("{:<16} {:>6} {:>5} {:>9} {:>9} {:>8} {:>8}  status", "variant", "width", "seed", "train_err", "val_err", "eligible", "valid");
    for c in &s.cells {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}%", 100.0 * x));
        println!(
            "{:<16} {:>6} {:>5} {:>9} {:>9} {:>8} {:>8}  {}",
            c.variant,
            c.capacity,
            c.seed,
            pct(c.train_error),
            pct(c.val_error),
            c.eligible,
            c.valid_margins,
            c.status
        );
    }
    println!();
    println!("{:<16} {:>6} {:<28} {:>10}", "variant", "width", "group", "mean");
    for v in &s.variants {
        for r in &v.curves {
            println!("{:<16} {:>6} {:<28} {:>10.4}", v.name, r.capacity, r.group.to_string(), r.mean);
        }
    }
}

fn execute(cli: &Cli) -> marginlab::Result<ExitCode> {
    let exp = open(cli)?;
    match &cli.command {
        Command::Ingest => exp.ingest()?,
        Command::Corrupt => exp.corrupt()?,
        Command::Train => {
            let failed = exp.train()?;
            for c in &failed {
                eprintln!("training failed: {c}");
            }
            if !failed.is_empty() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Maxmargins => exp.maxmargins()?,
        Command::Margins => {
            let state = exp.margins()?;
            println!("{} pair records in the ledger", state.records);
            if state.failed.values().any(|f| !f.is_empty()) {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report | Command::Run => {
            let s = exp.run()?;
            print_summary(&s);
            println!("\nreports written to {}", exp.path("reports").display());
            if s.partial_failure() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Verify {
            samples_per_cell,
            gradient_probes,
            maxmargin_queries,
        } => {
            let opts = VerifyOptions {
                samples_per_cell: *samples_per_cell,
                gradient_probes: *gradient_probes,
                maxmargin_queries: *maxmargin_queries,
                ..VerifyOptions::default()
            };
            let report = exp.verify(&opts)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !report.passed() {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Manifest(_) | Error::ManifestMismatch { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
