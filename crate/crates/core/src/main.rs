use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use elbo_razor::harness::{
    read_rows, run_experiment, scan_bound, write_outputs, ExperimentKind, Settings,
};
use elbo_razor::Error;

const THREADS_ENV: &str = "ELBO_RAZOR_THREADS";

#[derive(Parser)]
#[command(
    name = "elbo-razor",
    version,
    about = "Variational Bayesian linear regression on random Fourier features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predictive fits for each covariance structure (default N=20, R=1024).
    Fig1(RunArgs),
    /// ELBO and LML against the number of features, over feature replicates.
    Fig2(RunArgs),
    /// Rank-1 and full-rank fits with and without empirical Bayes on τ.
    Eb(RunArgs),
    /// Temperature sweep for the diagonal and rank-1 structures.
    Temper(RunArgs),
    /// A single custom grid of fits.
    Fit(RunArgs),
    /// Checks ELBO ≤ LML on every row of existing result CSVs.
    Scan(ScanArgs),
}

#[derive(Args, Default)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    /// Base seed for datasets and feature draws.
    #[arg(long)]
    seed: Option<String>,
    /// Number of training points.
    #[arg(long)]
    n: Option<String>,
    /// Feature count or comma-separated list.
    #[arg(long)]
    r: Option<String>,
    /// diag, rank1, full, a comma-separated list, or all.
    #[arg(long)]
    structure: Option<String>,
    /// Temperature or comma-separated list.
    #[arg(long)]
    temperature: Option<String>,
    /// Dataset seeds (feature draws for fig2).
    #[arg(long)]
    replicates: Option<String>,
    /// Empirical Bayes on τ: on or off.
    #[arg(long)]
    eb: Option<String>,
    /// closed or grad.
    #[arg(long = "eb-mode")]
    eb_mode: Option<String>,
    /// Rank-1 direction update: closed or adam.
    #[arg(long = "rank1-update")]
    rank1_update: Option<String>,
    /// Rank-1 jitter ε.
    #[arg(long)]
    epsilon: Option<String>,
    /// Comma-separated initial learning rates.
    #[arg(long = "lr-grid")]
    lr_grid: Option<String>,
    /// Iteration budget per fit.
    #[arg(long = "max-iters")]
    max_iters: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// key = value or JSON file with any of the options above.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn settings(&self) -> Result<Settings, Error> {
        let mut s = Settings::default();
        let flags = [
            ("seed", &self.seed),
            ("n", &self.n),
            ("r", &self.r),
            ("structure", &self.structure),
            ("temperature", &self.temperature),
            ("replicates", &self.replicates),
            ("eb", &self.eb),
            ("eb_mode", &self.eb_mode),
            ("rank1_update", &self.rank1_update),
            ("epsilon", &self.epsilon),
            ("lr_grid", &self.lr_grid),
            ("max_iters", &self.max_iters),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                s.set(key, v)?;
            }
        }
        Ok(s)
    }
}

#[derive(Args)]
struct ScanArgs {
    /// Result CSVs written by the other subcommands.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Relative tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

enum Outcome {
    Success,
    Partial,
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
        Error::Config(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<Outcome, Error> {
    let file = match &args.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    if let Some(k) = file.experiment {
        if k != kind {
            eprintln!("note: config names experiment `{k}`, running `{kind}`");
        }
    }
    let spec = file.merge(args.settings()?).to_spec(kind)?;
    let output = run_experiment(&spec)?;
    let files = write_outputs(&spec, &output)?;
    let failed = output.failures();
    println!(
        "{kind}: {} rows ({failed} failed), {} files in {}",
        output.rows.len(),
        files.len(),
        spec.out.display()
    );
    for row in output.rows.iter().filter(|r| !r.is_ok()) {
        eprintln!(
            "failed: {} R={} T={} seed={}: {}",
            row.structure, row.num_features, row.temperature, row.dataset_seed, row.error
        );
    }
    Ok(if failed > 0 {
        Outcome::Partial
    } else {
        Outcome::Success
    })
}

fn scan(args: &ScanArgs) -> Result<Outcome, Error> {
    let mut clean = true;
    for path in &args.files {
        let rows = read_rows(path)?;
        let report = scan_bound(&rows, args.tol);
        println!(
            "{}: {} rows checked, {} skipped, {} violations",
            path.display(),
            report.checked,
            report.skipped,
            report.violations.len()
        );
        for v in &report.violations {
            println!(
                "  line {}: {} R={} elbo={} > lml={}",
                v.line, v.structure, v.num_features, v.elbo, v.lml
            );
        }
        clean &= report.violations.is_empty();
    }
    Ok(if clean {
        Outcome::Success
    } else {
        Outcome::Partial
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Fig1(a) => run(ExperimentKind::Fig1, a),
        Command::Fig2(a) => run(ExperimentKind::Fig2, a),
        Command::Eb(a) => run(ExperimentKind::Eb, a),
        Command::Temper(a) => run(ExperimentKind::Temper, a),
        Command::Fit(a) => run(ExperimentKind::Fit, a),
        Command::Scan(a) => scan(a),
    });
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
