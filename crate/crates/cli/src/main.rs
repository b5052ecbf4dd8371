//! `goatlab`: verification suites, synthetic training runs, initialization
//! reports and cost tables.

mod config;
mod error;
mod run;

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;

use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};
use goat_core::costmodel::{
    cost_table, flops_estimate, param_count, Backbone, CostReport, Method, MethodQuery,
};
use goat_core::verify::{run_criterion, CriterionReport, Suite, DEFAULT_SEED};

use crate::config::{RunConfig, SEED_ENV};
use crate::error::CliError;

/// Print to stdout; a reader that went away (`| head`) is not an error.
macro_rules! out {
    ($($t:tt)*) => { emit(&format!($($t)*))? };
}

macro_rules! outln {
    ($($t:tt)*) => { emit(&(format!($($t)*) + "\n"))? };
}

#[derive(Parser)]
#[command(
    name = "goatlab",
    version,
    about = "SVD-segmented LoRA mixture-of-experts lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run numbered property suites and print every check.
    Verify {
        #[arg(value_parser = PossibleValuesParser::new(Suite::NAMES))]
        suite: String,
        /// Base seed; defaults to $GOATLAB_SEED, then the built-in seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a synthetic task and write metrics, summary and snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report the expert segments a config would initialise.
    InspectInit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Parameter share (and optionally FLOPs) of a fine-tuning method.
    Cost {
        backbone: Option<String>,
        /// Method name, optionally with a rank suffix such as `lora-r32`.
        method: Option<String>,
        /// Print every supported backbone/method pair.
        #[arg(long)]
        table: bool,
        /// Sequence length for the FLOPs estimate.
        #[arg(long, requires = "batch")]
        seq_len: Option<usize>,
        #[arg(long, requires = "seq_len")]
        batch: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { suite, seed } => verify(&suite, seed),
        Command::Train { config } => RunConfig::load(&config).and_then(|cfg| {
            let summary = run::train(&cfg)?;
            outln!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }),
        Command::InspectInit { config, json } => RunConfig::load(&config).and_then(|cfg| {
            let report = run::inspect_init(&cfg)?;
            if json {
                outln!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                out!("{}", report.render());
            }
            Ok(())
        }),
        Command::Cost {
            backbone,
            method,
            table,
            seq_len,
            batch,
        } => cost(backbone, method, table, seq_len.zip(batch)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("goatlab: {err}");
            err.exit_code()
        }
    }
}

fn emit(text: &str) -> Result<(), CliError> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn seed_from_env() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn verify(suite: &str, seed: Option<u64>) -> Result<(), CliError> {
    let suite: Suite = suite
        .parse()
        .map_err(|e: goat_core::GoatError| CliError::Usage(e.to_string()))?;
    let seed = match seed {
        Some(s) => s,
        None => seed_from_env()?,
    };
    // Each criterion draws from its own sub-stream, so they can run side by side.
    let reports: Vec<Result<CriterionReport, goat_core::GoatError>> = thread::scope(|s| {
        let handles: Vec<_> = suite
            .criteria()
            .into_iter()
            .map(|id| s.spawn(move || run_criterion(id, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("criterion thread panicked"))
            .collect()
    });

    let total = reports.len();
    let mut passing = 0;
    for report in reports {
        let report = report?;
        outln!("{}", report.summary());
        for check in &report.checks {
            outln!("    {check}");
        }
        passing += usize::from(report.passed());
    }
    outln!("{passing}/{total} criteria passed (seed {seed})");
    if passing == total {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{} criteria failed",
            total - passing
        )))
    }
}

fn usage(e: goat_core::GoatError) -> CliError {
    CliError::Usage(e.to_string())
}

fn render_cost(r: &CostReport) -> String {
    let mut line = format!(
        "{:<14} {:<12} trainable {:>14.0} of {:>14.0}  proportion {}%",
        r.backbone.to_string(),
        r.method.to_string(),
        r.trainable_params,
        r.total_params,
        r.display_proportion()
    );
    if let Some(f) = r.flops {
        line.push_str(&format!("  flops {f:.4e}"));
    }
    line
}

fn cost(
    backbone: Option<String>,
    method: Option<String>,
    table: bool,
    sequence: Option<(usize, usize)>,
) -> Result<(), CliError> {
    match (backbone, method) {
        (Some(b), Some(m)) => {
            let backbone: Backbone = b.parse().map_err(usage)?;
            let query: MethodQuery = m.parse().map_err(|e| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                CliError::Usage(format!("{e}; valid methods: {}", valid.join(", ")))
            })?;
            let mut spec = backbone.spec();
            if let Some((s, b)) = sequence {
                spec = spec.with_sequence(s, b);
            }
            let mut report = param_count(&spec, query).map_err(usage)?;
            if sequence.is_some() {
                report.flops = Some(flops_estimate(&spec, query.method).map_err(usage)?);
            }
            outln!("{}", render_cost(&report));
        }
        (None, None) if table => {}
        (Some(_), None) => {
            return Err(CliError::Usage(
                "cost needs a method after the backbone".into(),
            ))
        }
        _ => {
            return Err(CliError::Usage(
                "cost needs <backbone> <method>, or --table".into(),
            ))
        }
    }
    if table {
        for r in cost_table() {
            outln!("{}", render_cost(&r));
        }
        outln!("proportions are truncated, not rounded, to two decimals");
    }
    Ok(())
}
