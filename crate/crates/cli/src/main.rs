use clap::{Args, Parser, Subcommand, ValueEnum};
use opcheck_cli::{
    accuracy_rows, cost_rows, parse_range, to_csv, to_json, tune_rows, workload_rows,
    AccuracySpec, CheckerKind, CostSpec, Report, ReportError, WorkloadSpec,
};
use serde::Serialize;
use std::error::Error;
use std::path::PathBuf;

/// Probabilistic checkers for distributed data operations: accuracy
/// campaigns against injected faults, communication-cost reports,
/// parameter tuning, and workload generation, all reproducible from
/// the recorded command line and seed.
#[derive(Parser)]
#[command(name = "opcheck", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure false-accept rates under injected faults (or the
    /// false-reject rate with no manipulator).
    Accuracy(AccuracyArgs),
    /// Pick the cheapest sum-check parameters for an error target
    /// within a bit budget.
    Tune(TuneArgs),
    /// Report checker communication ledgers across input sizes.
    Cost(CostArgs),
    /// Generate a workload and print its round-robin placement.
    Workload(WorkloadArgs),
}

#[derive(Args)]
struct OutputArgs {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct AccuracyArgs {
    /// Checker under test: sum or perm.
    #[arg(long, default_value = "sum")]
    checker: String,
    /// Comma-separated configs: sum grammar <its>x<d>[m<log2rhat>][-<hash>],
    /// permutation grammar <hash><bits> (e.g. 1x2,4x4m3 or tab8,crc12).
    #[arg(long)]
    config: String,
    /// Hash family for sum configs without a suffix: crc, tab, tab64.
    #[arg(long)]
    hash: Option<String>,
    /// Comma-separated manipulators (e.g. randkey,incdec1,bitflip);
    /// omit or use `none` for correct-run mode.
    #[arg(long)]
    manipulator: Option<String>,
    /// Simulated processing elements.
    #[arg(long, default_value_t = 4)]
    pes: usize,
    /// Elements per campaign workload.
    #[arg(long, default_value_t = 50_000)]
    elements: u64,
    /// Distinct keys in the power-law key stream (sum checker).
    #[arg(long, default_value_t = 1_000_000)]
    distinct: u64,
    /// Manipulate-and-check trials per cell.
    #[arg(long, default_value_t = 20_000)]
    trials: u64,
    /// Master seed; all per-trial randomness derives from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct TuneArgs {
    /// Bit budget for one condensed table transmission.
    #[arg(long)]
    budget_bits: Option<u64>,
    /// Target false-accept probability.
    #[arg(long)]
    delta: Option<f64>,
    /// Regenerate the bundled budget/target sweep instead.
    #[arg(long, default_value_t = false)]
    table2: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CostArgs {
    /// Checker to measure: sum, perm, or min.
    #[arg(long)]
    checker: String,
    /// Checker config (required for sum and perm).
    #[arg(long)]
    config: Option<String>,
    /// Hash family for sum configs without a suffix: crc, tab, tab64.
    #[arg(long)]
    hash: Option<String>,
    /// Comma-separated input sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
    sizes: Vec<u64>,
    /// Simulated processing elements.
    #[arg(long, default_value_t = 8)]
    pes: usize,
    /// Workload seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct WorkloadArgs {
    /// Elements to generate.
    #[arg(long, default_value_t = 20)]
    elements: u64,
    /// Distinct keys of the power-law stream.
    #[arg(long, default_value_t = 1_000_000)]
    distinct: u64,
    /// Generate uniform elements in lo..hi instead (inclusive).
    #[arg(long)]
    uniform: Option<String>,
    /// Simulated processing elements for the round-robin placement.
    #[arg(long, default_value_t = 4)]
    pes: usize,
    /// Workload seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<(), Box<dyn Error>> {
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    let cli = Cli::parse();
    match cli.command {
        Command::Accuracy(a) => {
            let spec = AccuracySpec {
                checker: CheckerKind::parse(&a.checker)?,
                configs: a.config,
                hash: a.hash,
                manipulators: a.manipulator,
                pes: a.pes,
                elements: a.elements,
                distinct: a.distinct,
                trials: a.trials,
                seed: a.seed,
            };
            let rows = accuracy_rows(&spec)?;
            emit(&a.output, command_line, spec.seed, rows)
        }
        Command::Tune(t) => {
            let rows = tune_rows(t.budget_bits, t.delta, t.table2)?;
            emit(&t.output, command_line, 0, rows)
        }
        Command::Cost(c) => {
            let spec = CostSpec {
                checker: CheckerKind::parse(&c.checker)?,
                config: c.config,
                hash: c.hash,
                sizes: c.sizes,
                pes: c.pes,
                seed: c.seed,
            };
            let rows = cost_rows(&spec)?;
            emit(&c.output, command_line, spec.seed, rows)
        }
        Command::Workload(w) => {
            let spec = WorkloadSpec {
                uniform: w.uniform.as_deref().map(parse_range).transpose()?,
                distinct: w.distinct,
                elements: w.elements,
                pes: w.pes,
                seed: w.seed,
            };
            let rows = workload_rows(&spec)?;
            emit(&w.output, command_line, spec.seed, rows)
        }
    }
}

fn emit<T: Serialize>(
    output: &OutputArgs,
    command: String,
    master_seed: u64,
    rows: Vec<T>,
) -> Result<(), Box<dyn Error>> {
    let report = Report {
        command,
        master_seed,
        rows,
    };
    let text = match output.format {
        Format::Csv => to_csv(&report),
        Format::Json => to_json(&report),
    }
    .map_err(|e: ReportError| Box::new(e) as Box<dyn Error>)?;
    match &output.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
