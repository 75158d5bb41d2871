//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 when the share of
//! failed systems exceeds the configured threshold.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdeverse::harness::{export_training_stream, run_recovery, score_external, ExperimentConfig, Forecaster};
use sdeverse::scoring::SCORE_CSV_HEADER;
use sdeverse::universe::{validate_spec, CurriculumLevel, SdeSystemSpec};
use sdeverse::Error;

#[derive(Parser)]
#[command(name = "sdeverse", version, about = "Procedural SDE universes and distributional forecast scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the distribution-recovery benchmark.
    Recover(ConfigArgs),
    /// Write a stream of training records.
    ExportStream {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        records: usize,
    },
    /// Score a forecast sample file against an oracle sample file.
    Score {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        targets: usize,
    },
    /// Check a system spec JSON file against the level rules.
    ValidateSpec {
        #[arg(long)]
        spec: PathBuf,
    },
}

/// Flags mirror `ExperimentConfig`; they override values from `--config`.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    systems: Option<usize>,
    #[arg(long)]
    level: Option<i64>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    history_steps: Option<usize>,
    #[arg(long)]
    t_in: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    t_out: Option<f64>,
    #[arg(long)]
    oracle_paths: Option<usize>,
    #[arg(long)]
    forecast_paths: Option<usize>,
    /// Comma-separated subset of oracle_rebranch, historical_simulation, dcc_garch.
    #[arg(long, value_delimiter = ',')]
    forecasters: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    max_failure_fraction: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.root_seed = v;
        }
        if let Some(v) = self.systems {
            c.n_systems = v;
        }
        if let Some(v) = self.level {
            c.level = CurriculumLevel::new(v)?;
        }
        if let Some(v) = self.features {
            c.n_features = v;
        }
        if let Some(v) = self.targets {
            c.n_targets = v;
        }
        if let Some(v) = self.history_steps {
            c.history_steps = v;
        }
        if let Some(v) = self.t_in {
            c.t_in = v;
        }
        if let Some(v) = self.horizon {
            c.horizon = v;
        }
        if let Some(v) = self.t_out {
            c.t_out = v;
        }
        if let Some(v) = self.oracle_paths {
            c.n_oracle_paths = v;
        }
        if let Some(v) = self.forecast_paths {
            c.n_forecast_paths = v;
        }
        if let Some(list) = &self.forecasters {
            c.forecasters = list.iter().map(|s| s.parse::<Forecaster>()).collect::<Result<_, _>>()?;
        }
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.threads {
            c.thread_count = Some(v);
        }
        if let Some(v) = self.burn_in {
            c.burn_in = v;
        }
        if self.strict {
            c.strict = true;
        }
        if let Some(v) = self.max_failure_fraction {
            c.max_failure_fraction = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Recover(args) => {
            let config = match args.resolve() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let out = match run_recovery(&config) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            eprintln!(
                "{} systems aggregated, {} failed; outputs in {}",
                out.n_aggregated,
                out.n_failed,
                config.output_dir.display()
            );
            if out.failure_fraction() > config.max_failure_fraction {
                eprintln!(
                    "error: failure fraction {:.3} exceeds {}",
                    out.failure_fraction(),
                    config.max_failure_fraction
                );
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Command::ExportStream { config, records } => {
            let c = match config.resolve() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let Some(sink) = config.out.as_ref() else {
                return fail("export-stream needs --out <file>");
            };
            match export_training_stream(&c, records, sink) {
                Ok(n) => {
                    eprintln!("wrote {n} records to {}", sink.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Score { forecast, oracle, targets } => match score_external(&forecast, &oracle, targets) {
            Ok(report) => {
                println!("{SCORE_CSV_HEADER}");
                for row in report.csv_rows() {
                    println!("{row}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::ValidateSpec { spec } => {
            let text = match std::fs::read_to_string(&spec) {
                Ok(t) => t,
                Err(e) => return fail(format!("{}: {e}", spec.display())),
            };
            let parsed = match SdeSystemSpec::from_json(&text) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let problems = validate_spec(&parsed);
            if problems.is_empty() {
                println!("valid");
                ExitCode::SUCCESS
            } else {
                for p in &problems {
                    println!("{p}");
                }
                ExitCode::from(1)
            }
        }
    }
}
