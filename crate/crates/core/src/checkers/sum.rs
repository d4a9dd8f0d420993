//! Aggregation checkers: condensed modular reduction for sums,
//! counts, averages and medians, plus deterministic certificate
//! verification for minima.
//!
//! A wrong aggregate survives one reduction iteration only if every
//! bucket's value difference vanishes mod r, which a random bucket
//! map and a random modulus permit with probability at most
//! 1/rhat + 1/d.

use super::{
    broadcast_verdict, bucket_slice_bits, combine_rejections, replica_consistency,
    CheckError, IterationHashes, RejectReason, SumCheckConfig, Verdict, REPLICA_HASH,
};
use crate::dataops::{KeyValue, MedianAssertion, MinCertificate};
use crate::simnet::{BitString, Comm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashSet};

/// The per-iteration moduli, each uniform in (rhat, 2*rhat].
pub(crate) fn draw_moduli(rhat: u64, iterations: u32, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..iterations)
        .map(|_| rhat + 1 + rng.gen_range(0..rhat))
        .collect()
}

#[inline]
fn add_mod_lazy(acc: u64, v: u64, r: u64) -> u64 {
    // Entries stay unreduced until an addition would overflow; both
    // operands are < 2^63 afterwards, so the fallback cannot wrap.
    acc.checked_add(v).unwrap_or_else(|| (acc % r) + v)
}

#[inline]
fn residue(v: i128, r: u64) -> u64 {
    if v >= 0 && (v as u128) < r as u128 {
        v as u64
    } else {
        v.rem_euclid(r as i128) as u64
    }
}

/// Accumulates one side of table block `t` (of `t_count` interleaved
/// blocks) for all iterations at once: one hash evaluation per group
/// per element.
fn fold_side<I>(
    acc: &mut [u64],
    moduli: &[u64],
    ih: &IterationHashes,
    d: u64,
    t_count: usize,
    t: usize,
    pairs: I,
    negate: bool,
) where
    I: Iterator<Item = (u64, i128)>,
{
    let its = moduli.len() as u32;
    let mut slices = Vec::with_capacity(its as usize);
    for (key, value) in pairs {
        slices.clear();
        ih.slices_into(key, its, &mut slices);
        for (it, &slice) in slices.iter().enumerate() {
            let r = moduli[it];
            let mut v = residue(value, r);
            if negate {
                v = (r - v) % r;
            }
            let idx = (it * t_count + t) * d as usize + (slice % d) as usize;
            acc[idx] = add_mod_lazy(acc[idx], v, r);
        }
    }
}

/// One interleaved table block: `plus` entries add their value,
/// `minus` entries subtract it. Matching sides yield all-zero tables.
pub(crate) struct TablePair<'a> {
    pub plus: &'a [KeyValue],
    pub minus: &'a [KeyValue],
}

/// Core of every aggregation checker: builds all iterations' tables
/// for every block, reduces them to PE 0 in one message per tree edge,
/// and broadcasts the verdict.
pub(crate) fn run_sum_check(
    comm: &mut Comm,
    blocks: &[TablePair],
    wide_minus: &[(usize, Vec<(u64, i128)>)],
    config: &SumCheckConfig,
) -> Result<Verdict, CheckError> {
    config.validate()?;
    let its = config.iterations;
    let d = config.d;
    let t_count = blocks.len().max(wide_minus.iter().map(|(t, _)| t + 1).max().unwrap_or(0));
    let moduli = draw_moduli(config.rhat, its, config.modulus_seed);
    let ih = IterationHashes::new(config.hash, its, bucket_slice_bits(d))?;

    let mut acc = vec![0u64; its as usize * t_count * d as usize];
    for (t, block) in blocks.iter().enumerate() {
        fold_side(
            &mut acc,
            &moduli,
            &ih,
            d,
            t_count,
            t,
            block.plus.iter().map(|kv| (kv.key, kv.value as i128)),
            false,
        );
        fold_side(
            &mut acc,
            &moduli,
            &ih,
            d,
            t_count,
            t,
            block.minus.iter().map(|kv| (kv.key, kv.value as i128)),
            true,
        );
    }
    for (t, pairs) in wide_minus {
        fold_side(
            &mut acc,
            &moduli,
            &ih,
            d,
            t_count,
            *t,
            pairs.iter().copied(),
            true,
        );
    }
    for (i, a) in acc.iter_mut().enumerate() {
        *a %= moduli[i / (t_count * d as usize)];
    }

    let reduced = comm.reduce_vec(acc, config.entry_bits(), 0, |idx, a, b| {
        (a + b) % moduli[idx / (t_count * d as usize)]
    });
    let at_root = reduced.map(|table| {
        match table.iter().position(|&e| e != 0) {
            None => Verdict::accept(),
            Some(idx) => {
                let per_it = t_count * d as usize;
                Verdict {
                    accepted: false,
                    detail: Some(super::VerdictDetail {
                        reason: RejectReason::TableMismatch,
                        iteration: Some((idx / per_it) as u16),
                        index: Some((idx % per_it) as u32),
                        pe: None,
                    }),
                }
            }
        }
    });
    Ok(broadcast_verdict(comm, at_root))
}

/// Condensed reduction of a distributed key-value multiset: d residues
/// mod r at PE 0, bucketed by the hash of the key.
pub fn condensed_reduce(
    comm: &mut Comm,
    arr: &[KeyValue],
    d: u64,
    r: u64,
    hash: crate::hashing::HashSpec,
) -> Result<Option<Vec<u64>>, CheckError> {
    if d < 1 || r < 2 {
        return Err(CheckError::BadConfig("need d >= 1 and r >= 2".into()));
    }
    let ih = IterationHashes::new(hash, 1, bucket_slice_bits(d.max(2)))?;
    let mut acc = vec![0u64; d as usize];
    for kv in arr {
        let idx = (ih.slice(kv.key, 0) % d) as usize;
        acc[idx] = add_mod_lazy(acc[idx], residue(kv.value as i128, r), r);
    }
    for a in acc.iter_mut() {
        *a %= r;
    }
    let width = 64 - (r - 1).leading_zeros();
    Ok(comm.reduce_vec(acc, width, 0, |_, a, b| (a + b) % r))
}

/// Probabilistic sum-aggregation check: accepts a correct asserted
/// output always, a wrong one with probability at most
/// (1/rhat + 1/d)^iterations. Both sides may be distributed
/// arbitrarily; communication is independent of their size.
pub fn check_sum_agg(
    comm: &mut Comm,
    input: &[KeyValue],
    asserted: &[KeyValue],
    config: &SumCheckConfig,
) -> Result<Verdict, CheckError> {
    run_sum_check(
        comm,
        &[TablePair {
            plus: input,
            minus: asserted,
        }],
        &[],
        config,
    )
}

/// Count-aggregation check: sum aggregation with every input value
/// mapped to 1.
pub fn check_count_agg(
    comm: &mut Comm,
    input: &[KeyValue],
    asserted_counts: &[(u64, u64)],
    config: &SumCheckConfig,
) -> Result<Verdict, CheckError> {
    let ones: Vec<KeyValue> = input.iter().map(|kv| KeyValue::new(kv.key, 1)).collect();
    let counts: Vec<(u64, i128)> = asserted_counts
        .iter()
        .map(|&(k, c)| (k, c as i128))
        .collect();
    run_sum_check(
        comm,
        &[TablePair {
            plus: &ones,
            minus: &[],
        }],
        &[(0, counts)],
        config,
    )
}

/// One asserted per-key average: the exact rational num/den plus the
/// count certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AverageEntry {
    pub key: u64,
    pub num: i64,
    pub den: u64,
    pub count: u64,
}

/// Average check per the count-carrying reduction: reconstructs each
/// asserted sum as average times count (must be integral), then runs
/// the sum and count tables in one batched reduction. Scaling averages
/// up while scaling counts down trips the count table.
pub fn check_average(
    comm: &mut Comm,
    input: &[KeyValue],
    asserted: &[AverageEntry],
    config: &SumCheckConfig,
) -> Result<Verdict, CheckError> {
    config.validate()?;
    let mut bad = false;
    let mut sums: Vec<(u64, i128)> = Vec::with_capacity(asserted.len());
    let mut counts: Vec<(u64, i128)> = Vec::with_capacity(asserted.len());
    for e in asserted {
        let prod = e.num as i128 * e.count as i128;
        if e.den == 0 || prod % e.den as i128 != 0 {
            bad = true;
            break;
        }
        sums.push((e.key, prod / e.den as i128));
        counts.push((e.key, e.count as i128));
    }
    let verdict = combine_rejections(comm, bad.then_some(RejectReason::NonIntegralAverage));
    if !verdict.accepted {
        return Ok(verdict);
    }
    let ones: Vec<KeyValue> = input.iter().map(|kv| KeyValue::new(kv.key, 1)).collect();
    run_sum_check(
        comm,
        &[
            TablePair {
                plus: input,
                minus: &[],
            },
            TablePair {
                plus: &ones,
                minus: &[],
            },
        ],
        &[(0, sums), (1, counts)],
        config,
    )
}

fn encode_median_assertion(assertion: &MedianAssertion) -> BitString {
    let mut w = BitString::writer();
    for (k, e) in &assertion.entries {
        w.push_u64(*k);
        w.push_i128(e.num);
        w.push_bits(e.den, 2);
        w.push_u64(e.tie_break);
    }
    w.finish()
}

/// Median check: every element contributes its side of the asserted
/// median as +-1 and the balance must vanish per key. Elements equal
/// to the median count +1 each, compensated once at PE 0 by
/// -(2 * tie_break + 1 for odd groups), which nets the same per-key
/// sum as ranking the equal elements and zeroing the median position.
/// The parity signal is `den` (odd groups assert den 1, even groups
/// the unreduced den 2).
pub fn check_median(
    comm: &mut Comm,
    input: &[KeyValue],
    assertion: &MedianAssertion,
    config: &SumCheckConfig,
) -> Result<Verdict, CheckError> {
    config.validate()?;
    let replica = replica_consistency(comm, &encode_median_assertion(assertion), &REPLICA_HASH);
    if !replica.accepted {
        return Ok(replica);
    }

    let missing = input
        .iter()
        .any(|kv| !assertion.entries.contains_key(&kv.key));
    let verdict = combine_rejections(comm, missing.then_some(RejectReason::MissingKey));
    if !verdict.accepted {
        return Ok(verdict);
    }

    let mut contributions: Vec<KeyValue> = Vec::with_capacity(input.len());
    for kv in input {
        let entry = &assertion.entries[&kv.key];
        let c = match entry.cmp_value(kv.value) {
            std::cmp::Ordering::Less => -1,
            _ => 1,
        };
        contributions.push(KeyValue::new(kv.key, c));
    }
    if comm.pe() == 0 {
        for (k, e) in &assertion.entries {
            let correction = 2 * e.tie_break as i64 + (e.den == 1) as i64;
            if correction != 0 {
                contributions.push(KeyValue::new(*k, -correction));
            }
        }
    }
    run_sum_check(
        comm,
        &[TablePair {
            plus: &contributions,
            minus: &[],
        }],
        &[],
        config,
    )
}

fn encode_min_assertion(minima: &BTreeMap<u64, i64>, cert: &MinCertificate) -> BitString {
    let mut w = BitString::writer();
    w.push_u64(minima.len() as u64);
    for (k, v) in minima {
        w.push_u64(*k);
        w.push_u64(*v as u64);
    }
    for loc in &cert.locations {
        w.push_u64(loc.key);
        w.push_u64(loc.owner_pe as u64);
        w.push_u64(loc.min_value as u64);
    }
    w.finish()
}

/// Deterministic minimum-aggregation check. Minima and the location
/// certificate arrive replicated; after one replica-consistency pass,
/// each PE verifies locally that no element undercuts its key's
/// asserted minimum and every local key is asserted, that certificate
/// and output key sets coincide with values matching, and that every
/// certificate entry it owns is realized by a matching local element.
/// Apart from the replica hash compare, never errs.
pub fn check_min(
    comm: &mut Comm,
    input: &[KeyValue],
    asserted_min: &BTreeMap<u64, i64>,
    certificate: &MinCertificate,
) -> Verdict {
    let replica = replica_consistency(
        comm,
        &encode_min_assertion(asserted_min, certificate),
        &REPLICA_HASH,
    );
    if !replica.accepted {
        return replica;
    }

    let mut reason: Option<RejectReason> = None;
    for kv in input {
        match asserted_min.get(&kv.key) {
            None => {
                reason = Some(RejectReason::MissingKey);
                break;
            }
            Some(&m) if kv.value < m => {
                reason = Some(RejectReason::BelowAssertedMin);
                break;
            }
            _ => {}
        }
    }
    if reason.is_none() {
        let cert_keys: BTreeSet<u64> = certificate.locations.iter().map(|l| l.key).collect();
        let consistent = cert_keys.len() == certificate.locations.len()
            && cert_keys.len() == asserted_min.len()
            && certificate
                .locations
                .iter()
                .all(|l| asserted_min.get(&l.key) == Some(&l.min_value));
        if !consistent {
            reason = Some(RejectReason::CertificateMismatch);
        }
    }
    if reason.is_none() {
        let held: HashSet<(u64, i64)> = input.iter().map(|kv| (kv.key, kv.value)).collect();
        for loc in &certificate.locations {
            let out_of_range = loc.owner_pe >= comm.pes();
            let unrealized =
                loc.owner_pe == comm.pe() && !held.contains(&(loc.key, loc.min_value));
            if out_of_range || unrealized {
                reason = Some(RejectReason::PhantomCertificate);
                break;
            }
        }
    }
    combine_rejections(comm, reason)
}

/// Sequential reference of one sum-check iteration: do the input's and
/// the asserted output's condensed tables agree for this bucket map
/// and modulus? Lets callers enumerate maps and moduli exhaustively.
pub fn sum_tables_match(
    input: &[KeyValue],
    asserted: &[KeyValue],
    d: u64,
    r: u64,
    bucket_of: impl Fn(u64) -> u64,
) -> bool {
    let mut table_in = vec![0u64; d as usize];
    let mut table_out = vec![0u64; d as usize];
    for (side, table) in [(input, &mut table_in), (asserted, &mut table_out)] {
        for kv in side {
            let b = bucket_of(kv.key);
            assert!((1..=d).contains(&b), "bucket {b} outside 1..={d}");
            let idx = (b - 1) as usize;
            table[idx] = (table[idx] + residue(kv.value as i128, r)) % r;
        }
    }
    table_in == table_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataops::{median_aggregate, min_aggregate, sum_aggregate, MedianEntry};
    use crate::hashing::{HashFamily, HashSpec};
    use crate::simnet::{run, ClusterConfig};
    use std::collections::BTreeMap;

    fn kv(key: u64, value: i64) -> KeyValue {
        KeyValue::new(key, value)
    }

    fn tab64(seed: u64) -> HashSpec {
        HashSpec {
            family: HashFamily::Tab64,
            seed,
        }
    }

    fn strong_config(seed: u64) -> SumCheckConfig {
        SumCheckConfig {
            iterations: 4,
            d: 1 << 10,
            rhat: 1 << 20,
            hash: tab64(seed),
            modulus_seed: seed ^ 0xABCD,
        }
    }

    #[test]
    fn moduli_land_in_half_open_interval() {
        for rhat in [2u64, 8, 1 << 20] {
            let moduli = draw_moduli(rhat, 64, 99);
            assert!(moduli.iter().all(|&r| r > rhat && r <= 2 * rhat));
        }
        assert_eq!(draw_moduli(8, 8, 1), draw_moduli(8, 8, 1));
        assert_ne!(draw_moduli(1 << 20, 8, 1), draw_moduli(1 << 20, 8, 2));
    }

    #[test]
    fn condensed_reduce_zero_values_give_zero_table() {
        let cfg = ClusterConfig::new(2);
        let (out, _) = run(&cfg, vec![vec![kv(5, 0)], vec![kv(9, 0)]], |comm, arr| {
            condensed_reduce(comm, &arr, 4, 13, tab64(1)).unwrap()
        })
        .unwrap();
        assert_eq!(out[0], Some(vec![0; 4]));
    }

    #[test]
    fn condensed_reduce_two_buckets_direct() {
        // Probe for keys landing in buckets 1 and 2 so the table is
        // readable off the definition.
        let spec = tab64(7);
        let ih = IterationHashes::new(spec, 1, 1).unwrap();
        let bucket = |k: u64| (ih.slice(k, 0) % 2) + 1;
        let k1 = (0..).find(|&k| bucket(k) == 1).unwrap();
        let k2 = (0..).find(|&k| bucket(k) == 2).unwrap();
        let cfg = ClusterConfig::new(1);
        let (out, _) = run(&cfg, vec![vec![kv(k1, 5), kv(k2, 9)]], |comm, arr| {
            condensed_reduce(comm, &arr, 2, 13, tab64(7)).unwrap()
        })
        .unwrap();
        assert_eq!(out[0], Some(vec![5, 9]));
    }

    #[test]
    fn condensed_reduce_wraps_mod_r() {
        let spec = tab64(7);
        let ih = IterationHashes::new(spec, 1, 1).unwrap();
        let k1 = (0..).find(|&k| (ih.slice(k, 0) % 2) + 1 == 1).unwrap();
        let cfg = ClusterConfig::new(1);
        let (out, _) = run(&cfg, vec![vec![kv(k1, 10), kv(k1, 10), kv(k1, -3)]], |comm, arr| {
            condensed_reduce(comm, &arr, 2, 13, tab64(7)).unwrap()
        })
        .unwrap();
        assert_eq!(out[0], Some(vec![(10 + 10 + 13 - 3) % 13, 0]));
    }

    #[test]
    fn condensed_reduce_matches_sequential_oracle() {
        let spec = tab64(21);
        let d = 8u64;
        let r = 100u64;
        let all: Vec<KeyValue> = (0..200)
            .map(|i| kv((i * 37) % 23, ((i * 101) % 57) as i64 - 28))
            .collect();
        let ih = IterationHashes::new(spec, 1, bucket_slice_bits(d)).unwrap();
        let mut oracle = vec![0u64; d as usize];
        for e in &all {
            let idx = (ih.slice(e.key, 0) % d) as usize;
            oracle[idx] = (oracle[idx] + (e.value as i128).rem_euclid(r as i128) as u64) % r;
        }
        let cfg = ClusterConfig::new(4);
        let inputs: Vec<Vec<KeyValue>> = (0..4)
            .map(|pe| all.iter().skip(pe).step_by(4).copied().collect())
            .collect();
        let (out, _) = run(&cfg, inputs, |comm, arr| {
            condensed_reduce(comm, &arr, 8, 100, tab64(21)).unwrap()
        })
        .unwrap();
        assert_eq!(out[0], Some(oracle));
    }

    fn spread<T: Clone>(all: &[T], p: usize) -> Vec<Vec<T>> {
        (0..p)
            .map(|pe| all.iter().skip(pe).step_by(p).cloned().collect())
            .collect()
    }

    #[test]
    fn sum_check_accepts_correct_aggregation() {
        let all: Vec<KeyValue> = (0..500)
            .map(|i| kv((i * 7) % 40, ((i * 13) % 200) as i64 - 100))
            .collect();
        let cfg = ClusterConfig::new(4);
        let inputs = spread(&all, 4);
        let (sums, _) = run(&cfg, inputs.clone(), |comm, local| {
            sum_aggregate(comm, &local).unwrap()
        })
        .unwrap();
        let asserted: Vec<KeyValue> = sums[0]
            .clone()
            .unwrap()
            .into_iter()
            .map(|(k, v)| kv(k, v))
            .collect();
        for seed in 0..20 {
            let joint: Vec<(Vec<KeyValue>, Vec<KeyValue>)> = inputs
                .iter()
                .enumerate()
                .map(|(pe, local)| {
                    let a = if pe == 0 { asserted.clone() } else { vec![] };
                    (local.clone(), a)
                })
                .collect();
            let (verdicts, _) = run(&cfg, joint, |comm, (input, asserted)| {
                check_sum_agg(comm, &input, &asserted, &strong_config(seed)).unwrap()
            })
            .unwrap();
            assert!(verdicts.iter().all(|v| v.accepted), "seed {seed}");
            assert_eq!(verdicts[0], verdicts[3]);
        }
    }

    #[test]
    fn sum_check_rejects_single_key_corruption() {
        let all: Vec<KeyValue> = (0..100).map(|i| kv(i % 10, i as i64)).collect();
        let mut asserted: Vec<KeyValue> = {
            let mut m = BTreeMap::new();
            for e in &all {
                *m.entry(e.key).or_insert(0i64) += e.value;
            }
            m.into_iter().map(|(k, v)| kv(k, v)).collect()
        };
        asserted[3].value += 1;
        let cfg = ClusterConfig::new(2);
        let inputs: Vec<(Vec<KeyValue>, Vec<KeyValue>)> = vec![
            (spread(&all, 2)[0].clone(), asserted),
            (spread(&all, 2)[1].clone(), vec![]),
        ];
        let (verdicts, _) = run(&cfg, inputs, |comm, (input, asserted)| {
            check_sum_agg(comm, &input, &asserted, &strong_config(5)).unwrap()
        })
        .unwrap();
        for v in &verdicts {
            assert!(!v.accepted);
            let d = v.detail.as_ref().unwrap();
            assert_eq!(d.reason, RejectReason::TableMismatch);
            assert!(d.iteration.is_some());
        }
    }

    #[test]
    fn table_payload_matches_pinned_sizes() {
        // its=4, d=4, rhat=2^3: 4-bit entries, 16 bits per iteration,
        // 64 bits total on each tree edge.
        let config = SumCheckConfig {
            iterations: 4,
            d: 4,
            rhat: 8,
            hash: tab64(3),
            modulus_seed: 9,
        };
        assert_eq!(config.entry_bits(), 4);
        let cfg = ClusterConfig::new(2);
        let (verdicts, ledger) = run(&cfg, vec![vec![kv(1, 2)], vec![]], |comm, input| {
            let asserted = if comm.pe() == 0 { vec![kv(1, 2)] } else { vec![] };
            check_sum_agg(comm, &input, &asserted, &config).unwrap()
        })
        .unwrap();
        assert!(verdicts[0].accepted);
        assert_eq!(ledger.pe[1].sent_bits, 64);
    }

    #[test]
    fn empty_instance_accepts() {
        let cfg = ClusterConfig::new(2);
        let (verdicts, _) = run(&cfg, vec![(), ()], |comm, _| {
            check_sum_agg(comm, &[], &[], &strong_config(1)).unwrap()
        })
        .unwrap();
        assert!(verdicts.iter().all(|v| v.accepted));
    }

    #[test]
    fn config_validation_errors() {
        let cfg = ClusterConfig::new(1);
        let bad = SumCheckConfig {
            iterations: 0,
            d: 4,
            rhat: 8,
            hash: tab64(0),
            modulus_seed: 0,
        };
        let (out, _) = run(&cfg, vec![()], |comm, _| {
            check_sum_agg(comm, &[], &[], &bad).unwrap_err()
        })
        .unwrap();
        assert!(matches!(out[0], CheckError::BadConfig(_)));
        let bad = SumCheckConfig {
            iterations: 1,
            d: 16,
            rhat: 8,
            hash: tab64(0),
            modulus_seed: 0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn count_check_accepts_and_rejects() {
        let all: Vec<KeyValue> = (0..60).map(|i| kv(i % 7, 1000 + i as i64)).collect();
        let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
        for e in &all {
            *counts.entry(e.key).or_insert(0) += 1;
        }
        let good: Vec<(u64, u64)> = counts.iter().map(|(&k, &c)| (k, c)).collect();
        let mut bad = good.clone();
        bad[2].1 += 1;
        let cfg = ClusterConfig::new(2);
        for (asserted, expect) in [(good, true), (bad, false)] {
            let inputs: Vec<(Vec<KeyValue>, Vec<(u64, u64)>)> = vec![
                (spread(&all, 2)[0].clone(), asserted),
                (spread(&all, 2)[1].clone(), vec![]),
            ];
            let (verdicts, _) = run(&cfg, inputs, |comm, (input, asserted)| {
                check_count_agg(comm, &input, &asserted, &strong_config(11)).unwrap()
            })
            .unwrap();
            assert!(verdicts.iter().all(|v| v.accepted == expect));
        }
    }

    #[test]
    fn average_check_accepts_exact_rationals() {
        let all = vec![kv(1, 2), kv(1, 4), kv(2, 5), kv(2, 5), kv(2, 5)];
        // key 1: average 3 of 2 elements; key 2: average 5 of 3.
        let asserted = vec![
            AverageEntry { key: 1, num: 3, den: 1, count: 2 },
            AverageEntry { key: 2, num: 5, den: 1, count: 3 },
        ];
        let cfg = ClusterConfig::new(2);
        let inputs = vec![
            (spread(&all, 2)[0].clone(), asserted.clone()),
            (spread(&all, 2)[1].clone(), vec![]),
        ];
        let (verdicts, _) = run(&cfg, inputs, |comm, (input, asserted)| {
            check_average(comm, &input, &asserted, &strong_config(17)).unwrap()
        })
        .unwrap();
        assert!(verdicts.iter().all(|v| v.accepted));
    }

    #[test]
    fn average_check_catches_doubled_average_halved_count() {
        let all: Vec<KeyValue> = (0..8).map(|i| kv(1, 10 + (i % 2) as i64 * 2)).collect();
        // True: sum 88, count 8, average 11. Scaled: average 22,
        // count 4 reconstructs the same sum 88.
        let good = vec![AverageEntry { key: 1, num: 11, den: 1, count: 8 }];
        let scaled = vec![AverageEntry { key: 1, num: 22, den: 1, count: 4 }];
        let cfg = ClusterConfig::new(2);
        for (asserted, expect) in [(good, true), (scaled, false)] {
            let inputs = vec![
                (spread(&all, 2)[0].clone(), asserted),
                (spread(&all, 2)[1].clone(), vec![]),
            ];
            let (verdicts, _) = run(&cfg, inputs, |comm, (input, asserted)| {
                check_average(comm, &input, &asserted, &strong_config(23)).unwrap()
            })
            .unwrap();
            assert!(verdicts.iter().all(|v| v.accepted == expect));
        }
    }

    #[test]
    fn average_check_rejects_non_integral_reconstruction() {
        let all = vec![kv(1, 1), kv(1, 2)];
        let asserted = vec![AverageEntry { key: 1, num: 3, den: 2, count: 3 }];
        let cfg = ClusterConfig::new(2);
        let inputs = vec![(all, asserted), (vec![], vec![])];
        let (verdicts, _) = run(&cfg, inputs, |comm, (input, asserted)| {
            check_average(comm, &input, &asserted, &strong_config(29)).unwrap()
        })
        .unwrap();
        for v in &verdicts {
            assert!(!v.accepted);
            assert_eq!(
                v.detail.as_ref().unwrap().reason,
                RejectReason::NonIntegralAverage
            );
        }
    }

    #[test]
    fn average_check_fractional_average_accepts() {
        let all = vec![kv(1, 1), kv(1, 2)];
        let asserted = vec![AverageEntry { key: 1, num: 3, den: 2, count: 2 }];
        let cfg = ClusterConfig::new(1);
        let (verdicts, _) = run(&cfg, vec![(all, asserted)], |comm, (input, asserted)| {
            check_average(comm, &input, &asserted, &strong_config(31)).unwrap()
        })
        .unwrap();
        assert!(verdicts[0].accepted);
    }

    fn median_assertion(entries: &[(u64, i128, u64, u64)]) -> MedianAssertion {
        MedianAssertion {
            entries: entries
                .iter()
                .map(|&(k, num, den, tie_break)| (k, MedianEntry { num, den, tie_break }))
                .collect(),
        }
    }

    #[test]
    fn median_check_accepts_dataop_output() {
        let all: Vec<KeyValue> = (0..300).map(|i| kv(i % 13, ((i * 31) % 97) as i64)).collect();
        let cfg = ClusterConfig::new(4);
        let inputs = spread(&all, 4);
        let route = tab64(0x1234);
        let (assertions, _) = run(&cfg, inputs.clone(), |comm, local| {
            median_aggregate(comm, &local, &route)
        })
        .unwrap();
        let assertion = assertions[0].clone();
        let joint: Vec<(Vec<KeyValue>, MedianAssertion)> = inputs
            .into_iter()
            .map(|local| (local, assertion.clone()))
            .collect();
        let (verdicts, _) = run(&cfg, joint, |comm, (input, assertion)| {
            check_median(comm, &input, &assertion, &strong_config(41)).unwrap()
        })
        .unwrap();
        assert!(verdicts.iter().all(|v| v.accepted));
    }

    #[test]
    fn median_check_examples() {
        let cases: Vec<(Vec<KeyValue>, MedianAssertion, bool)> = vec![
            (
                vec![kv(1, 1), kv(1, 2), kv(1, 3)],
                median_assertion(&[(1, 2, 1, 0)]),
                true,
            ),
            (
                vec![kv(1, 1), kv(1, 3)],
                median_assertion(&[(1, 4, 2, 0)]),
                true,
            ),
            (
                vec![kv(1, 2), kv(1, 2)],
                median_assertion(&[(1, 4, 2, 1)]),
                true,
            ),
            (
                vec![kv(1, 1), kv(1, 2), kv(1, 3)],
                median_assertion(&[(1, 1, 1, 0)]),
                false,
            ),
        ];
        let cfg = ClusterConfig::new(2);
        for (all, assertion, expect) in cases {
            let inputs = vec![
                (spread(&all, 2)[0].clone(), assertion.clone()),
                (spread(&all, 2)[1].clone(), assertion.clone()),
            ];
            let (verdicts, _) = run(&cfg, inputs, |comm, (input, assertion)| {
                check_median(comm, &input, &assertion, &strong_config(43)).unwrap()
            })
            .unwrap();
            assert!(
                verdicts.iter().all(|v| v.accepted == expect),
                "case expected {expect}"
            );
        }
    }

    #[test]
    fn median_check_rejects_missing_key_deterministically() {
        let cfg = ClusterConfig::new(2);
        let inputs = vec![
            (vec![kv(1, 5)], median_assertion(&[(1, 5, 1, 0)])),
            (vec![kv(2, 9)], median_assertion(&[(1, 5, 1, 0)])),
        ];
        let (verdicts, _) = run(&cfg, inputs, |comm, (input, assertion)| {
            check_median(comm, &input, &assertion, &strong_config(47)).unwrap()
        })
        .unwrap();
        for v in &verdicts {
            assert!(!v.accepted);
            assert_eq!(v.detail.as_ref().unwrap().reason, RejectReason::MissingKey);
        }
    }

    #[test]
    fn median_check_rejects_divergent_replicas() {
        let cfg = ClusterConfig::new(2);
        let inputs = vec![
            (vec![kv(1, 5)], median_assertion(&[(1, 5, 1, 0)])),
            (vec![kv(1, 5)], median_assertion(&[(1, 6, 1, 0)])),
        ];
        let (verdicts, _) = run(&cfg, inputs, |comm, (input, assertion)| {
            check_median(comm, &input, &assertion, &strong_config(53)).unwrap()
        })
        .unwrap();
        for v in &verdicts {
            assert!(!v.accepted);
            assert_eq!(
                v.detail.as_ref().unwrap().reason,
                RejectReason::ReplicaMismatch
            );
        }
    }

    #[test]
    fn sequential_tables_agree_with_distributed_checker() {
        // Single-iteration checker vs the pure reference, same bucket
        // map and modulus, over correct and corrupted instances.
        for seed in 0..50u64 {
            let all: Vec<KeyValue> = (0..40)
                .map(|i| kv((i * 3 + seed) % 11, ((i * 7 + seed) % 50) as i64))
                .collect();
            let mut asserted: Vec<KeyValue> = {
                let mut m = BTreeMap::new();
                for e in &all {
                    *m.entry(e.key).or_insert(0i64) += e.value;
                }
                m.into_iter().map(|(k, v)| kv(k, v)).collect()
            };
            if seed % 2 == 0 {
                let i = (seed as usize / 2) % asserted.len();
                asserted[i].value = asserted[i].value.wrapping_add(1 + seed as i64);
            }
            let config = SumCheckConfig {
                iterations: 1,
                d: 4,
                rhat: 16,
                hash: tab64(seed),
                modulus_seed: seed,
            };
            let ih = IterationHashes::new(config.hash, 1, bucket_slice_bits(4)).unwrap();
            let r = draw_moduli(16, 1, seed)[0];
            let expected = sum_tables_match(&all, &asserted, 4, r, |k| (ih.slice(k, 0) % 4) + 1);

            let cfg = ClusterConfig::new(2);
            let halves = spread(&all, 2);
            let inputs = vec![(halves[0].clone(), asserted), (halves[1].clone(), vec![])];
            let (verdicts, _) = run(&cfg, inputs, |comm, (input, asserted)| {
                check_sum_agg(comm, &input, &asserted, &config).unwrap()
            })
            .unwrap();
            assert_eq!(verdicts[0].accepted, expected, "seed {seed}");
        }
    }

    fn min_instance(p: usize) -> (Vec<Vec<KeyValue>>, BTreeMap<u64, i64>, MinCertificate) {
        let all: Vec<KeyValue> = (0..300)
            .map(|i| kv((i * 11) % 17, ((i * 29) % 90) as i64 - 45))
            .collect();
        let inputs = spread(&all, p);
        let cfg = ClusterConfig::new(p);
        let (out, _) = run(&cfg, inputs.clone(), |comm, local| {
            min_aggregate(comm, &local)
        })
        .unwrap();
        let (minima, cert) = out[0].clone();
        (inputs, minima, cert)
    }

    fn run_min_check(
        p: usize,
        inputs: &[Vec<KeyValue>],
        minima: &BTreeMap<u64, i64>,
        cert: &MinCertificate,
    ) -> Vec<Verdict> {
        let cfg = ClusterConfig::new(p);
        let joint: Vec<_> = inputs
            .iter()
            .map(|local| (local.clone(), minima.clone(), cert.clone()))
            .collect();
        let (verdicts, _) = run(&cfg, joint, |comm, (input, minima, cert)| {
            check_min(comm, &input, &minima, &cert)
        })
        .unwrap();
        verdicts
    }

    #[test]
    fn min_check_accepts_correct_aggregation() {
        for p in [1usize, 2, 4] {
            let (inputs, minima, cert) = min_instance(p);
            let verdicts = run_min_check(p, &inputs, &minima, &cert);
            assert!(verdicts.iter().all(|v| v.accepted), "p={p}");
            assert_eq!(verdicts[0], verdicts[p - 1]);
        }
    }

    #[test]
    fn min_check_rejects_raised_minimum() {
        let (inputs, mut minima, mut cert) = min_instance(4);
        let key = *minima.keys().next().unwrap();
        *minima.get_mut(&key).unwrap() += 1;
        for loc in cert.locations.iter_mut() {
            if loc.key == key {
                loc.min_value += 1;
            }
        }
        let verdicts = run_min_check(4, &inputs, &minima, &cert);
        assert!(verdicts.iter().all(|v| !v.accepted));
        assert_eq!(
            verdicts[0].detail.as_ref().unwrap().reason,
            RejectReason::BelowAssertedMin
        );
    }

    #[test]
    fn min_check_rejects_lowered_minimum_via_certificate() {
        // The lowered value is present in no input, so the owner PE
        // cannot realize its certificate entry.
        let (inputs, mut minima, mut cert) = min_instance(4);
        let key = *minima.keys().next().unwrap();
        *minima.get_mut(&key).unwrap() -= 1;
        for loc in cert.locations.iter_mut() {
            if loc.key == key {
                loc.min_value -= 1;
            }
        }
        let verdicts = run_min_check(4, &inputs, &minima, &cert);
        assert!(verdicts.iter().all(|v| !v.accepted));
        assert_eq!(
            verdicts[0].detail.as_ref().unwrap().reason,
            RejectReason::PhantomCertificate
        );
    }

    #[test]
    fn min_check_rejects_missing_key() {
        let (inputs, mut minima, mut cert) = min_instance(4);
        let key = *minima.keys().next().unwrap();
        minima.remove(&key);
        cert.locations.retain(|l| l.key != key);
        let verdicts = run_min_check(4, &inputs, &minima, &cert);
        assert!(verdicts.iter().all(|v| !v.accepted));
        assert_eq!(
            verdicts[0].detail.as_ref().unwrap().reason,
            RejectReason::MissingKey
        );
    }

    #[test]
    fn min_check_rejects_certificate_key_set_mismatch() {
        let (inputs, minima, mut cert) = min_instance(4);
        cert.locations.pop();
        let verdicts = run_min_check(4, &inputs, &minima, &cert);
        assert!(verdicts.iter().all(|v| !v.accepted));
        assert_eq!(
            verdicts[0].detail.as_ref().unwrap().reason,
            RejectReason::CertificateMismatch
        );
    }

    #[test]
    fn min_check_rejects_out_of_range_owner() {
        let (inputs, minima, mut cert) = min_instance(4);
        cert.locations[0].owner_pe = 64;
        let verdicts = run_min_check(4, &inputs, &minima, &cert);
        assert!(verdicts.iter().all(|v| !v.accepted));
        assert_eq!(
            verdicts[0].detail.as_ref().unwrap().reason,
            RejectReason::PhantomCertificate
        );
    }

    #[test]
    fn min_check_rejects_diverging_replicas() {
        let (inputs, minima, cert) = min_instance(4);
        let cfg = ClusterConfig::new(4);
        let joint: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(pe, local)| {
                let mut copy = minima.clone();
                if pe == 3 {
                    let key = *copy.keys().next().unwrap();
                    *copy.get_mut(&key).unwrap() ^= 1;
                }
                (local.clone(), copy, cert.clone())
            })
            .collect();
        let (verdicts, _) = run(&cfg, joint, |comm, (input, minima, cert)| {
            check_min(comm, &input, &minima, &cert)
        })
        .unwrap();
        assert!(verdicts.iter().all(|v| !v.accepted));
        assert_eq!(
            verdicts[0].detail.as_ref().unwrap().reason,
            RejectReason::ReplicaMismatch
        );
        assert_eq!(verdicts[0], verdicts[2]);
    }
}
