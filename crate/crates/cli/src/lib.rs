//! Library half of the `opcheck` binary: maps command-line requests to
//! campaigns in the core crate and renders results as machine-readable
//! reports.
//!
//! Every report carries a reproducibility header, the exact command
//! line plus the master seed, so re-running the recorded command
//! regenerates every row bit for bit. CSV embeds the header as `#`
//! comment lines, JSON as top-level fields; both formats parse back to
//! the in-memory report exactly (floats use shortest round-trip
//! encoding).

use opcheck::experiment::{
    run_accuracy, run_cost_report, AccuracyCampaign, AccuracyTask, ConfigParseError, CostRow,
    CostTarget, ExperimentError, ExperimentResult, PermConfigId, SumConfigId,
};
use opcheck::faults::FaultKind;
use opcheck::hashing::HashFamily;
use opcheck::tuner::{self, TuneError, BUDGET_SWEEP};
use opcheck::workload::{deal_round_robin, gen_workload, Workload, WorkloadError, WorkloadKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriveError {
    #[error("unknown checker {0:?} (use sum, perm, or min)")]
    UnknownChecker(String),
    #[error("unknown manipulator {0:?}")]
    UnknownManipulator(String),
    #[error("unknown hash family {0:?} (use crc, tab, or tab64)")]
    UnknownHash(String),
    #[error(transparent)]
    Config(#[from] ConfigParseError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing or malformed header line: {0}")]
    Header(String),
}

/// Rows plus the reproducibility header they were produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub command: String,
    pub master_seed: u64,
    pub rows: Vec<T>,
}

/// Flat accuracy-campaign row: one per (config, manipulator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub config: String,
    pub manipulator: String,
    pub trials: u64,
    pub failures: u64,
    pub observed_rate: f64,
    pub expected_delta: f64,
    pub ratio: Option<f64>,
    pub bottleneck_volume: u64,
    pub rounds: u64,
    pub total_sent_bits: u64,
    pub messages: u64,
}

impl From<ExperimentResult> for AccuracyRow {
    fn from(r: ExperimentResult) -> Self {
        AccuracyRow {
            config: r.config,
            manipulator: r.manipulator,
            trials: r.trials,
            failures: r.failures,
            observed_rate: r.observed_rate,
            expected_delta: r.expected_delta,
            ratio: r.ratio,
            bottleneck_volume: r.ledger.bottleneck_volume,
            rounds: r.ledger.rounds,
            total_sent_bits: r.ledger.total_sent_bits,
            messages: r.ledger.messages,
        }
    }
}

/// Flat cost-report row: one per (checker, input size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReportRow {
    pub checker: String,
    pub config: String,
    pub n: u64,
    pub pes: usize,
    pub distinct_keys: u64,
    pub bottleneck_volume: u64,
    pub rounds: u64,
    pub total_sent_bits: u64,
    pub messages: u64,
}

impl From<CostRow> for CostReportRow {
    fn from(r: CostRow) -> Self {
        CostReportRow {
            checker: r.checker,
            config: r.config,
            n: r.n,
            pes: r.pes,
            distinct_keys: r.distinct_keys,
            bottleneck_volume: r.ledger.bottleneck_volume,
            rounds: r.ledger.rounds,
            total_sent_bits: r.ledger.total_sent_bits,
            messages: r.ledger.messages,
        }
    }
}

/// One tuned sum-check configuration for a (budget, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub budget_bits: u64,
    pub target_delta: f64,
    pub iterations: u32,
    pub d: u64,
    pub rhat: u64,
    pub achieved_delta: f64,
    pub payload_bits: u64,
}

fn tune_row(budget_bits: u64, target_delta: f64, r: tuner::TuneResult) -> TuneRow {
    TuneRow {
        budget_bits,
        target_delta,
        iterations: r.iterations,
        d: r.d,
        rhat: r.rhat,
        achieved_delta: r.achieved_delta,
        payload_bits: r.payload_bits,
    }
}

/// One generated element with its round-robin placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadRow {
    pub pe: usize,
    pub slot: usize,
    pub element: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckerKind {
    Sum,
    Perm,
    Min,
}

impl CheckerKind {
    pub fn parse(s: &str) -> Result<Self, DriveError> {
        match s {
            "sum" => Ok(CheckerKind::Sum),
            "perm" | "permutation" => Ok(CheckerKind::Perm),
            "min" => Ok(CheckerKind::Min),
            other => Err(DriveError::UnknownChecker(other.to_string())),
        }
    }
}

impl fmt::Display for CheckerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckerKind::Sum => "sum",
            CheckerKind::Perm => "perm",
            CheckerKind::Min => "min",
        })
    }
}

fn parse_hash(s: &str) -> Result<HashFamily, DriveError> {
    HashFamily::parse_cli_name(s).ok_or_else(|| DriveError::UnknownHash(s.to_string()))
}

/// Comma-separated manipulator names; `none` (or an empty request)
/// selects correct-run mode, which measures the false-reject rate.
pub fn parse_manipulators(s: Option<&str>) -> Result<Vec<Option<FaultKind>>, DriveError> {
    let Some(s) = s else {
        return Ok(vec![None]);
    };
    s.split(',')
        .map(|name| match name.trim() {
            "none" => Ok(None),
            other => FaultKind::parse_cli_name(other)
                .map(Some)
                .ok_or_else(|| DriveError::UnknownManipulator(other.to_string())),
        })
        .collect()
}

/// An accuracy request: the cartesian grid of configs x manipulators,
/// each cell a full campaign on the same generated workload.
#[derive(Debug, Clone)]
pub struct AccuracySpec {
    pub checker: CheckerKind,
    /// Comma-separated config strings in the checker's grammar.
    pub configs: String,
    /// Fallback hash family for sum configs without a hash suffix.
    pub hash: Option<String>,
    /// Comma-separated manipulator names, `none` for correct-run mode.
    pub manipulators: Option<String>,
    pub pes: usize,
    pub elements: u64,
    /// Distinct-key count of the power-law key stream (sum checker).
    pub distinct: u64,
    pub trials: u64,
    pub seed: u64,
}

/// The config's own hash suffix wins; the flag fills in configs
/// without one, so mixed-family grids work under a single flag.
fn resolve_sum_family(id: SumConfigId, flag: Option<HashFamily>) -> HashFamily {
    id.family.or(flag).unwrap_or(HashFamily::Tab32)
}

pub fn accuracy_rows(spec: &AccuracySpec) -> Result<Vec<AccuracyRow>, DriveError> {
    let flag = spec.hash.as_deref().map(parse_hash).transpose()?;
    let manipulators = parse_manipulators(spec.manipulators.as_deref())?;
    let mut tasks = Vec::new();
    for cfg in spec.configs.split(',') {
        let cfg = cfg.trim();
        let task = match spec.checker {
            CheckerKind::Sum => {
                let id = SumConfigId::parse(cfg)?;
                let family = resolve_sum_family(id, flag);
                AccuracyTask::Sum { config: id, family }
            }
            CheckerKind::Perm => AccuracyTask::Perm {
                config: PermConfigId::parse(cfg)?,
            },
            CheckerKind::Min => {
                return Err(DriveError::Usage(
                    "the min checker is deterministic; use the cost subcommand".into(),
                ))
            }
        };
        tasks.push(task);
    }
    let workload = |task: &AccuracyTask| Workload {
        kind: match task {
            AccuracyTask::Sum { .. } => WorkloadKind::PowerLaw {
                distinct: spec.distinct,
            },
            AccuracyTask::Perm { .. } => WorkloadKind::Uniform {
                lo: 0,
                hi: 100_000_000 - 1,
            },
        },
        n: spec.elements,
        seed: spec.seed,
    };
    let mut rows = Vec::with_capacity(tasks.len() * manipulators.len());
    for task in &tasks {
        for &manipulator in &manipulators {
            let campaign = AccuracyCampaign {
                task: *task,
                workload: workload(task),
                pes: spec.pes,
                trials: spec.trials,
                manipulator,
                master_seed: spec.seed,
            };
            rows.push(run_accuracy(&campaign)?.into());
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct CostSpec {
    pub checker: CheckerKind,
    /// Config string; required for sum and perm, ignored for min.
    pub config: Option<String>,
    pub hash: Option<String>,
    pub sizes: Vec<u64>,
    pub pes: usize,
    pub seed: u64,
}

pub fn cost_rows(spec: &CostSpec) -> Result<Vec<CostReportRow>, DriveError> {
    let flag = spec.hash.as_deref().map(parse_hash).transpose()?;
    let need_config = || {
        spec.config
            .as_deref()
            .ok_or_else(|| DriveError::Usage(format!("--config is required for {}", spec.checker)))
    };
    let target = match spec.checker {
        CheckerKind::Sum => {
            let id = SumConfigId::parse(need_config()?)?;
            let family = resolve_sum_family(id, flag);
            CostTarget::Sum { config: id, family }
        }
        CheckerKind::Perm => CostTarget::Perm {
            config: PermConfigId::parse(need_config()?)?,
        },
        CheckerKind::Min => CostTarget::Min,
    };
    let rows = run_cost_report(&target, &spec.sizes, spec.pes, spec.seed)?;
    Ok(rows.into_iter().map(CostReportRow::from).collect())
}

/// Tunes one (budget, target) pair, or regenerates the bundled sweep.
pub fn tune_rows(
    budget_bits: Option<u64>,
    delta: Option<f64>,
    sweep: bool,
) -> Result<Vec<TuneRow>, DriveError> {
    if sweep {
        return Ok(tuner::budget_sweep_results()
            .into_iter()
            .map(|((b, dl), r)| tune_row(b, dl, r))
            .collect());
    }
    match (budget_bits, delta) {
        (Some(b), Some(dl)) => Ok(vec![tune_row(b, dl, tuner::optimize(b, dl)?)]),
        _ => Err(DriveError::Usage(
            "tune needs --budget-bits and --delta, or --table2".into(),
        )),
    }
}

/// Sweep pairs bundled with `tune --table2`.
pub fn sweep_pairs() -> &'static [(u64, f64)] {
    &BUDGET_SWEEP
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    /// None generates the power-law stream, Some((lo, hi)) a uniform one.
    pub uniform: Option<(u64, u64)>,
    pub distinct: u64,
    pub elements: u64,
    pub pes: usize,
    pub seed: u64,
}

pub fn workload_rows(spec: &WorkloadSpec) -> Result<Vec<WorkloadRow>, DriveError> {
    if spec.pes == 0 {
        return Err(DriveError::Usage("need at least one PE".into()));
    }
    let w = Workload {
        kind: match spec.uniform {
            Some((lo, hi)) => WorkloadKind::Uniform { lo, hi },
            None => WorkloadKind::PowerLaw {
                distinct: spec.distinct,
            },
        },
        n: spec.elements,
        seed: spec.seed,
    };
    let dealt = deal_round_robin(&gen_workload(&w)?, spec.pes);
    let mut rows = Vec::new();
    for (pe, elems) in dealt.into_iter().enumerate() {
        for (slot, element) in elems.into_iter().enumerate() {
            rows.push(WorkloadRow { pe, slot, element });
        }
    }
    Ok(rows)
}

/// Parses `lo..hi` (inclusive bounds) for uniform workloads.
pub fn parse_range(s: &str) -> Result<(u64, u64), DriveError> {
    let err = || DriveError::Usage(format!("expected lo..hi, got {s:?}"));
    let (lo, hi) = s.split_once("..").ok_or_else(err)?;
    Ok((
        lo.trim().parse().map_err(|_| err())?,
        hi.trim().parse().map_err(|_| err())?,
    ))
}

pub fn to_json<T: Serialize>(report: &Report<T>) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<Report<T>, ReportError> {
    Ok(serde_json::from_str(text)?)
}

pub fn to_csv<T: Serialize>(report: &Report<T>) -> Result<String, ReportError> {
    let mut out = format!(
        "# command: {}\n# master_seed: {}\n",
        report.command, report.master_seed
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        w.serialize(row)?;
    }
    let body = w.into_inner().expect("vec writer cannot fail");
    out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    Ok(out)
}

pub fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Report<T>, ReportError> {
    let mut command = None;
    let mut master_seed = None;
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# command: ") {
            command = Some(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("# master_seed: ") {
            master_seed = match rest.trim().parse::<u64>() {
                Ok(v) => Some(v),
                Err(_) => return Err(ReportError::Header(line.to_string())),
            };
        } else if line.starts_with('#') {
            continue;
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let command = command.ok_or_else(|| ReportError::Header("# command: ...".into()))?;
    let master_seed =
        master_seed.ok_or_else(|| ReportError::Header("# master_seed: ...".into()))?;
    let mut rows = Vec::new();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(Report {
        command,
        master_seed,
        rows,
    })
}
