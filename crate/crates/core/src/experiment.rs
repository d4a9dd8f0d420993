//! Experiment driver: the config-string grammar shared by CLI and
//! logs, reproducible accuracy campaigns against injected faults, and
//! communication-cost reports.
//!
//! A campaign fixes one generated workload and repeats manipulate +
//! check with fresh per-trial randomness (hash seed, moduli seed,
//! corruption target), the quantities the checker guarantees range
//! over. Everything derives from the master seed, so identical
//! parameters reproduce identical results bit for bit.

use crate::checkers::{
    check_min, check_permutation_hash, check_sum_agg, CheckError, PermCheckConfig, SumCheckConfig,
};
use crate::dataops::{min_aggregate, KeyValue};
use crate::faults::{
    perm_manipulation_patch, sum_manipulation_patch, FaultError, FaultKind, Manipulation,
};
use crate::hashing::{splitmix64, HashFamily, HashSpec};
use crate::simnet::{run, ClusterConfig, CostLedger, SimError};
use crate::tuner;
use crate::workload::{deal_round_robin, gen_workload, Workload, WorkloadError, WorkloadKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Values paired with power-law keys in sum-checker campaigns.
pub const VALUE_MAX: u64 = 1_000_000;

const VALUE_STREAM_SALT: u64 = 0xA5A5_1E77_0B07_391D;
const ACCURACY_SALT: u64 = 0x9C67_44F1_2A83_55E9;
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigParseError {
    #[error("expected <its>x<d>[m<log2rhat>][-<hash>], got {0:?}")]
    SumShape(String),
    #[error("unknown hash family {0:?} (use crc, tab, or tab64)")]
    UnknownHash(String),
    #[error("iterations must be >= 1")]
    ZeroIterations,
    #[error("bucket count must be >= 2")]
    TinyBucketCount,
    #[error("log2 rhat {0} outside 1..=62")]
    RhatRange(u32),
    #[error("rhat 2^{log2_rhat} is below the bucket count {d}")]
    RhatBelowBuckets { d: u64, log2_rhat: u32 },
    #[error("expected <hash><bits>, got {0:?}")]
    PermShape(String),
    #[error("{family} fingerprints support 1..={max} bits, got {bits}")]
    BitsRange {
        family: &'static str,
        bits: u32,
        max: u32,
    },
}

/// Sum-checker configuration string `<its>x<d>[m<log2rhat>][-<hash>]`;
/// the modulus exponent defaults to 31 and the hash suffix is optional
/// (the driver's hash flag fills it in).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumConfigId {
    pub iterations: u32,
    pub d: u64,
    pub log2_rhat: u32,
    pub family: Option<HashFamily>,
}

impl SumConfigId {
    pub fn parse(s: &str) -> Result<Self, ConfigParseError> {
        let (head, family) = match s.split_once('-') {
            Some((h, f)) => {
                let fam = HashFamily::parse_cli_name(f)
                    .ok_or_else(|| ConfigParseError::UnknownHash(f.to_string()))?;
                (h, Some(fam))
            }
            None => (s, None),
        };
        let (its_s, rest) = head
            .split_once('x')
            .ok_or_else(|| ConfigParseError::SumShape(s.to_string()))?;
        let (d_s, m_s) = match rest.split_once('m') {
            Some((d, m)) => (d, Some(m)),
            None => (rest, None),
        };
        let shape = || ConfigParseError::SumShape(s.to_string());
        let iterations: u32 = its_s.parse().map_err(|_| shape())?;
        let d: u64 = d_s.parse().map_err(|_| shape())?;
        let log2_rhat: u32 = match m_s {
            Some(m) => m.parse().map_err(|_| shape())?,
            None => 31,
        };
        if iterations == 0 {
            return Err(ConfigParseError::ZeroIterations);
        }
        if d < 2 {
            return Err(ConfigParseError::TinyBucketCount);
        }
        if !(1..=62).contains(&log2_rhat) {
            return Err(ConfigParseError::RhatRange(log2_rhat));
        }
        if (1u64 << log2_rhat) < d {
            return Err(ConfigParseError::RhatBelowBuckets { d, log2_rhat });
        }
        Ok(SumConfigId {
            iterations,
            d,
            log2_rhat,
            family,
        })
    }

    pub fn rhat(&self) -> u64 {
        1u64 << self.log2_rhat
    }

    /// Per-iteration bound is 1/rhat + 1/d; iterations multiply.
    pub fn expected_delta(&self) -> f64 {
        tuner::achieved_delta(self.d, self.rhat(), self.iterations).expect("validated at parse")
    }

    pub fn with_family(self, family: HashFamily) -> SumConfigId {
        SumConfigId {
            family: Some(family),
            ..self
        }
    }

    pub fn check_config(
        &self,
        family: HashFamily,
        hash_seed: u64,
        modulus_seed: u64,
    ) -> SumCheckConfig {
        SumCheckConfig {
            iterations: self.iterations,
            d: self.d,
            rhat: self.rhat(),
            hash: HashSpec {
                family,
                seed: hash_seed,
            },
            modulus_seed,
        }
    }
}

impl fmt::Display for SumConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}m{}", self.iterations, self.d, self.log2_rhat)?;
        if let Some(fam) = self.family {
            write!(f, "-{}", fam.cli_name())?;
        }
        Ok(())
    }
}

/// Permutation-checker configuration string `<hash><bits>`, longest
/// family name first, e.g. `crc12`, `tab8`, `tab6412`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermConfigId {
    pub family: HashFamily,
    pub bits_h: u32,
}

impl PermConfigId {
    pub fn parse(s: &str) -> Result<Self, ConfigParseError> {
        for family in [HashFamily::Tab64, HashFamily::Tab32, HashFamily::Crc32c] {
            let name = family.cli_name();
            let Some(rest) = s.strip_prefix(name) else {
                continue;
            };
            if rest.is_empty() {
                continue;
            }
            let Ok(bits) = rest.parse::<u32>() else {
                continue;
            };
            let max = family.output_bits();
            if bits == 0 || bits > max {
                return Err(ConfigParseError::BitsRange {
                    family: name,
                    bits,
                    max,
                });
            }
            return Ok(PermConfigId {
                family,
                bits_h: bits,
            });
        }
        Err(ConfigParseError::PermShape(s.to_string()))
    }

    pub fn expected_delta(&self) -> f64 {
        0.5f64.powi(self.bits_h as i32)
    }

    pub fn check_config(&self, hash_seed: u64) -> PermCheckConfig {
        PermCheckConfig {
            bits_h: self.bits_h,
            iterations: 1,
            hash: HashSpec {
                family: self.family,
                seed: hash_seed,
            },
        }
    }
}

impl fmt::Display for PermConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.family.cli_name(), self.bits_h)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigParseError),
    #[error("manipulator {manipulator} does not apply to the {checker} checker")]
    IncompatiblePair {
        checker: &'static str,
        manipulator: String,
    },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("fault injection failed: {0}")]
    Fault(#[from] FaultError),
    #[error("checker rejected the configuration: {0}")]
    Check(#[from] CheckError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Usage(String),
}

/// Which checker an accuracy campaign drives, with its configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyTask {
    Sum {
        config: SumConfigId,
        family: HashFamily,
    },
    Perm {
        config: PermConfigId,
    },
}

#[derive(Debug, Clone)]
pub struct AccuracyCampaign {
    pub task: AccuracyTask,
    /// Key stream for sum campaigns, element stream for permutation
    /// campaigns; values pair up from a derived uniform stream.
    pub workload: Workload,
    pub pes: usize,
    pub trials: u64,
    /// None measures the correct-run (false-reject) rate instead.
    pub manipulator: Option<FaultKind>,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub bottleneck_volume: u64,
    pub rounds: u64,
    pub total_sent_bits: u64,
    pub messages: u64,
}

impl LedgerSummary {
    pub fn of(ledger: &CostLedger) -> Self {
        LedgerSummary {
            bottleneck_volume: ledger.bottleneck_volume,
            rounds: ledger.rounds,
            total_sent_bits: ledger.total_sent_bits(),
            messages: ledger.pe.iter().map(|c| c.sent_msgs).sum(),
        }
    }
}

/// One accuracy-campaign row. `failures` counts false accepts under a
/// manipulator and false rejects in correct-run mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: String,
    pub manipulator: String,
    pub trials: u64,
    pub failures: u64,
    pub observed_rate: f64,
    pub expected_delta: f64,
    pub ratio: Option<f64>,
    pub ledger: LedgerSummary,
}

/// Standard deviation of an observed binomial rate at the given
/// success probability.
pub fn binomial_sigma(delta: f64, trials: u64) -> f64 {
    (delta * (1.0 - delta) / trials as f64).sqrt()
}

fn trial_seed_base(master_seed: u64) -> u64 {
    splitmix64(master_seed ^ ACCURACY_SALT)
}

fn trial_seeds(base: u64, trial: u64) -> (u64, u64, u64) {
    let s = splitmix64(base ^ trial.wrapping_mul(GOLDEN));
    (splitmix64(s ^ 1), splitmix64(s ^ 2), splitmix64(s ^ 3))
}

/// Splits a flat round-robin index into (pe, local index).
#[inline]
fn dealt_slot(flat_idx: usize, pes: usize) -> (usize, usize) {
    (flat_idx % pes, flat_idx / pes)
}

pub fn run_accuracy(c: &AccuracyCampaign) -> Result<ExperimentResult, ExperimentError> {
    if c.pes == 0 {
        return Err(ExperimentError::Usage("need at least one PE".into()));
    }
    if c.trials == 0 {
        return Err(ExperimentError::Usage("need at least one trial".into()));
    }
    match c.task {
        AccuracyTask::Sum { config, family } => sum_accuracy(c, config, family),
        AccuracyTask::Perm { config } => perm_accuracy(c, config),
    }
}

fn sum_accuracy(
    c: &AccuracyCampaign,
    id: SumConfigId,
    family: HashFamily,
) -> Result<ExperimentResult, ExperimentError> {
    if let Some(kind) = c.manipulator {
        if !kind.is_sum_kind() {
            return Err(ExperimentError::IncompatiblePair {
                checker: "sum",
                manipulator: kind.cli_name(),
            });
        }
    }
    let keys = gen_workload(&c.workload)?;
    if keys.is_empty() {
        return Err(ExperimentError::Usage("workload is empty".into()));
    }
    let values = gen_workload(&Workload {
        kind: WorkloadKind::Uniform {
            lo: 1,
            hi: VALUE_MAX,
        },
        n: c.workload.n,
        seed: splitmix64(c.workload.seed ^ VALUE_STREAM_SALT),
    })?;
    let flat: Vec<KeyValue> = keys
        .iter()
        .zip(&values)
        .map(|(&k, &v)| KeyValue::new(k, v as i64))
        .collect();

    let mut sums: BTreeMap<u64, i128> = BTreeMap::new();
    for kv in &flat {
        *sums.entry(kv.key).or_insert(0) += kv.value as i128;
    }
    let asserted: Vec<KeyValue> = sums
        .into_iter()
        .map(|(k, s)| {
            i64::try_from(s)
                .map(|v| KeyValue::new(k, v))
                .map_err(|_| ExperimentError::Usage(format!("sum for key {k} overflows i64")))
        })
        .collect::<Result<_, _>>()?;

    let mut input_pe = deal_round_robin(&flat, c.pes);
    let asserted_pe = deal_round_robin(&asserted, c.pes);
    let cluster = ClusterConfig::new(c.pes);
    let base = trial_seed_base(c.master_seed);

    let mut failures = 0u64;
    let mut ledger_summary = None;
    for trial in 0..c.trials {
        let (hash_seed, modulus_seed, manip_seed) = trial_seeds(base, trial);
        let cfg = id.check_config(family, hash_seed, modulus_seed);
        let patch = match c.manipulator {
            Some(kind) => sum_manipulation_patch(&flat, &Manipulation::new(kind, manip_seed))?,
            None => Vec::new(),
        };
        for &(i, new) in &patch {
            let (pe, slot) = dealt_slot(i, c.pes);
            input_pe[pe][slot] = new;
        }
        let (verdicts, ledger) = run(&cluster, vec![(); c.pes], |comm, ()| {
            check_sum_agg(comm, &input_pe[comm.pe()], &asserted_pe[comm.pe()], &cfg)
        })?;
        for &(i, _) in &patch {
            let (pe, slot) = dealt_slot(i, c.pes);
            input_pe[pe][slot] = flat[i];
        }
        let mut verdicts = verdicts.into_iter().collect::<Result<Vec<_>, _>>()?;
        debug_assert!(verdicts.windows(2).all(|w| w[0] == w[1]));
        let verdict = verdicts.pop().expect("at least one PE");
        let failed = match c.manipulator {
            Some(_) => verdict.accepted,
            None => !verdict.accepted,
        };
        failures += failed as u64;
        ledger_summary.get_or_insert_with(|| LedgerSummary::of(&ledger));
    }

    let expected_delta = match c.manipulator {
        Some(_) => id.expected_delta(),
        None => 0.0,
    };
    Ok(assemble_result(
        id.with_family(family).to_string(),
        c,
        failures,
        expected_delta,
        ledger_summary.expect("at least one trial"),
    ))
}

fn perm_accuracy(
    c: &AccuracyCampaign,
    id: PermConfigId,
) -> Result<ExperimentResult, ExperimentError> {
    if let Some(kind) = c.manipulator {
        if !kind.is_perm_kind() {
            return Err(ExperimentError::IncompatiblePair {
                checker: "permutation",
                manipulator: kind.cli_name(),
            });
        }
    }
    let elems = gen_workload(&c.workload)?;
    if elems.is_empty() {
        return Err(ExperimentError::Usage("workload is empty".into()));
    }
    let n = elems.len();
    let rotated: Vec<u64> = (0..n).map(|i| elems[(i + n / 2) % n]).collect();
    let input_pe = deal_round_robin(&elems, c.pes);
    let mut output_pe = deal_round_robin(&rotated, c.pes);
    let cluster = ClusterConfig::new(c.pes);
    let base = trial_seed_base(c.master_seed);

    let mut failures = 0u64;
    let mut ledger_summary = None;
    for trial in 0..c.trials {
        let (hash_seed, _, manip_seed) = trial_seeds(base, trial);
        let cfg = id.check_config(hash_seed);
        let patch = match c.manipulator {
            Some(kind) => {
                let m = Manipulation::on_output(kind, manip_seed);
                perm_manipulation_patch(&rotated, &m)?
            }
            None => Vec::new(),
        };
        for &(i, new) in &patch {
            let (pe, slot) = dealt_slot(i, c.pes);
            output_pe[pe][slot] = new;
        }
        let (verdicts, ledger) = run(&cluster, vec![(); c.pes], |comm, ()| {
            check_permutation_hash(comm, &input_pe[comm.pe()], &output_pe[comm.pe()], &cfg)
        })?;
        for &(i, _) in &patch {
            let (pe, slot) = dealt_slot(i, c.pes);
            output_pe[pe][slot] = rotated[i];
        }
        let mut verdicts = verdicts.into_iter().collect::<Result<Vec<_>, _>>()?;
        debug_assert!(verdicts.windows(2).all(|w| w[0] == w[1]));
        let verdict = verdicts.pop().expect("at least one PE");
        let failed = match c.manipulator {
            Some(_) => verdict.accepted,
            None => !verdict.accepted,
        };
        failures += failed as u64;
        ledger_summary.get_or_insert_with(|| LedgerSummary::of(&ledger));
    }

    let expected_delta = match c.manipulator {
        Some(_) => id.expected_delta(),
        None => 0.0,
    };
    Ok(assemble_result(
        id.to_string(),
        c,
        failures,
        expected_delta,
        ledger_summary.expect("at least one trial"),
    ))
}

fn assemble_result(
    config: String,
    c: &AccuracyCampaign,
    failures: u64,
    expected_delta: f64,
    ledger: LedgerSummary,
) -> ExperimentResult {
    let observed_rate = failures as f64 / c.trials as f64;
    ExperimentResult {
        config,
        manipulator: c
            .manipulator
            .map_or_else(|| "none".to_string(), |k| k.cli_name()),
        trials: c.trials,
        failures,
        observed_rate,
        expected_delta,
        ratio: (expected_delta > 0.0).then(|| observed_rate / expected_delta),
        ledger,
    }
}

/// What a cost report measures. Sum and permutation rows cover the
/// checker run alone; minimum rows cover aggregation plus check, since
/// that pipeline pays the result+certificate replication the checker's
/// precondition demands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostTarget {
    Sum {
        config: SumConfigId,
        family: HashFamily,
    },
    Perm {
        config: PermConfigId,
    },
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub checker: String,
    pub config: String,
    pub n: u64,
    pub pes: usize,
    pub distinct_keys: u64,
    pub ledger: LedgerSummary,
}

fn cost_workload_pairs(n: u64, seed: u64) -> Result<Vec<KeyValue>, ExperimentError> {
    let keys = gen_workload(&Workload {
        kind: WorkloadKind::Uniform {
            lo: 0,
            hi: (n / 10).max(1),
        },
        n,
        seed,
    })?;
    let values = gen_workload(&Workload {
        kind: WorkloadKind::Uniform {
            lo: 1,
            hi: VALUE_MAX,
        },
        n,
        seed: splitmix64(seed ^ VALUE_STREAM_SALT),
    })?;
    Ok(keys
        .iter()
        .zip(&values)
        .map(|(&k, &v)| KeyValue::new(k, v as i64))
        .collect())
}

pub fn run_cost_report(
    target: &CostTarget,
    sizes: &[u64],
    pes: usize,
    seed: u64,
) -> Result<Vec<CostRow>, ExperimentError> {
    if pes == 0 {
        return Err(ExperimentError::Usage("need at least one PE".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for (i, &n) in sizes.iter().enumerate() {
        if n == 0 {
            return Err(ExperimentError::Usage("sizes must be positive".into()));
        }
        let wseed = splitmix64(seed ^ (i as u64 + 1));
        let cluster = ClusterConfig::new(pes);
        let row = match target {
            CostTarget::Sum { config, family } => {
                let flat = cost_workload_pairs(n, wseed)?;
                let mut sums: BTreeMap<u64, i64> = BTreeMap::new();
                for kv in &flat {
                    *sums.entry(kv.key).or_insert(0) += kv.value;
                }
                let distinct = sums.len() as u64;
                let asserted: Vec<KeyValue> =
                    sums.into_iter().map(|(k, v)| KeyValue::new(k, v)).collect();
                let input_pe = deal_round_robin(&flat, pes);
                let asserted_pe = deal_round_robin(&asserted, pes);
                let cfg = config.check_config(*family, splitmix64(wseed ^ 1), splitmix64(wseed ^ 2));
                let (verdicts, ledger) = run(&cluster, vec![(); pes], |comm, ()| {
                    check_sum_agg(comm, &input_pe[comm.pe()], &asserted_pe[comm.pe()], &cfg)
                })?;
                let verdict = verdicts.into_iter().next().expect("pe 0")?;
                assert!(verdict.accepted, "correct instance must be accepted");
                CostRow {
                    checker: "sum".into(),
                    config: config.with_family(*family).to_string(),
                    n,
                    pes,
                    distinct_keys: distinct,
                    ledger: LedgerSummary::of(&ledger),
                }
            }
            CostTarget::Perm { config } => {
                let elems = gen_workload(&Workload {
                    kind: WorkloadKind::Uniform {
                        lo: 0,
                        hi: 100_000_000 - 1,
                    },
                    n,
                    seed: wseed,
                })?;
                let len = elems.len();
                let rotated: Vec<u64> = (0..len).map(|i| elems[(i + len / 2) % len]).collect();
                let input_pe = deal_round_robin(&elems, pes);
                let output_pe = deal_round_robin(&rotated, pes);
                let cfg = config.check_config(splitmix64(wseed ^ 1));
                let (verdicts, ledger) = run(&cluster, vec![(); pes], |comm, ()| {
                    check_permutation_hash(comm, &input_pe[comm.pe()], &output_pe[comm.pe()], &cfg)
                })?;
                let verdict = verdicts.into_iter().next().expect("pe 0")?;
                assert!(verdict.accepted, "correct instance must be accepted");
                CostRow {
                    checker: "perm".into(),
                    config: config.to_string(),
                    n,
                    pes,
                    distinct_keys: 0,
                    ledger: LedgerSummary::of(&ledger),
                }
            }
            CostTarget::Min => {
                let flat = cost_workload_pairs(n, wseed)?;
                let input_pe = deal_round_robin(&flat, pes);
                let (outs, ledger) = run(&cluster, vec![(); pes], |comm, ()| {
                    let local = &input_pe[comm.pe()];
                    let (minima, cert) = min_aggregate(comm, local);
                    let verdict = check_min(comm, local, &minima, &cert);
                    (verdict, minima.len() as u64)
                })?;
                let (verdict, k) = outs.into_iter().next().expect("pe 0");
                assert!(verdict.accepted, "correct instance must be accepted");
                CostRow {
                    checker: "min".into(),
                    config: "-".into(),
                    n,
                    pes,
                    distinct_keys: k,
                    ledger: LedgerSummary::of(&ledger),
                }
            }
        };
        rows.push(row);
    }
    if matches!(target, CostTarget::Sum { .. } | CostTarget::Perm { .. }) {
        for pair in rows.windows(2) {
            assert_eq!(
                pair[0].ledger, pair[1].ledger,
                "checker communication must not depend on n"
            );
        }
    }
    Ok(rows)
}
