//! Reference distributed operations on the simulated cluster.
//!
//! These are the computations whose asserted outputs the checkers
//! verify, so they define ground truth independently: all arithmetic
//! is exact (wide integers, rationals), never modular. Each operation
//! is a per-PE program communicating only through [`Comm`].

use crate::hashing::{HashSpec, Hasher};
use crate::simnet::{BitReader, BitString, BitWriter, Comm};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// One element of a distributed key-value multiset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyValue {
    pub key: u64,
    pub value: i64,
}

impl KeyValue {
    pub fn new(key: u64, value: i64) -> Self {
        KeyValue { key, value }
    }
}

/// Aggregated key with its exact value sum and element count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyValueCount {
    pub key: u64,
    pub value_sum: i64,
    pub count: u64,
}

/// Where each per-key minimum lives; replicated in full at every PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinLocation {
    pub key: u64,
    pub owner_pe: usize,
    pub min_value: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MinCertificate {
    pub locations: Vec<MinLocation>,
}

/// Exact per-key median (`num/den`, `den` is 1 or 2) plus the
/// tie-break count: how many median-valued elements rank strictly
/// below the median position under (value, global index) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MedianEntry {
    pub num: i128,
    pub den: u64,
    pub tie_break: u64,
}

impl MedianEntry {
    /// Exact comparison of an element value against the median.
    pub fn cmp_value(&self, value: i64) -> std::cmp::Ordering {
        (value as i128 * self.den as i128).cmp(&self.num)
    }
}

/// Per-key medians with tie-break certificate, replicated at every PE.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MedianAssertion {
    pub entries: BTreeMap<u64, MedianEntry>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataOpError {
    #[error("exact sum for key {key} exceeds the 64-bit value range")]
    SumOverflow { key: u64 },
    #[error("zip requires equal global lengths, got {left} and {right}")]
    ZipLengthMismatch { left: u64, right: u64 },
}

/// Merges per-PE maps to `root` along a binomial tree. Entries are
/// wire-framed by `push`/`pull`; colliding keys combine via `merge`.
fn tree_merge<V>(
    comm: &mut Comm,
    root: usize,
    mut map: BTreeMap<u64, V>,
    push: impl Fn(&mut BitWriter, u64, &V),
    pull: impl Fn(&mut BitReader) -> (u64, V),
    mut merge: impl FnMut(&mut V, V),
) -> Option<BTreeMap<u64, V>> {
    let p = comm.pes();
    let v = (comm.pe() + p - root) % p;
    let depth = p.next_power_of_two().trailing_zeros();
    for r in 0..depth {
        let dist = 1usize << r;
        if v & dist != 0 {
            let mut w = BitString::writer();
            for (k, val) in &map {
                push(&mut w, *k, val);
            }
            comm.send((v - dist + root) % p, w.finish());
            return None;
        }
        if v + dist < p {
            let msg = comm.recv((v + dist + root) % p);
            let mut rd = msg.reader();
            while rd.remaining() > 0 {
                let (k, val) = pull(&mut rd);
                match map.entry(k) {
                    std::collections::btree_map::Entry::Occupied(e) => merge(e.into_mut(), val),
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(val);
                    }
                }
            }
        }
    }
    Some(map)
}

/// Broadcasts PE 0's validation outcome so every PE returns the same
/// Result: 1 ok-bit, then the offending key on failure.
fn broadcast_verdict(comm: &mut Comm, root_outcome: Option<Result<(), u64>>) -> Result<(), u64> {
    let payload = root_outcome.map(|out| {
        let mut w = BitString::writer();
        match out {
            Ok(()) => w.push_bits(1, 1),
            Err(key) => {
                w.push_bits(0, 1);
                w.push_u64(key);
            }
        }
        w.finish()
    });
    let bits = comm.broadcast_bits(payload, 0);
    let mut rd = bits.reader();
    if rd.read_bits(1) == 1 {
        Ok(())
    } else {
        Err(rd.read_u64())
    }
}

fn allgather_counts(comm: &mut Comm, count: u64) -> Vec<u64> {
    let mut v = vec![0u64; comm.pes()];
    v[comm.pe()] = count;
    comm.all_reduce_vec(v, 64, |_, a, b| a + b)
}

/// Exact per-key sums, delivered at PE 0 (`None` elsewhere). Errors
/// uniformly at every PE if any exact sum leaves the 64-bit range.
pub fn sum_aggregate(
    comm: &mut Comm,
    local: &[KeyValue],
) -> Result<Option<BTreeMap<u64, i64>>, DataOpError> {
    let mut table: BTreeMap<u64, i128> = BTreeMap::new();
    for kv in local {
        *table.entry(kv.key).or_insert(0) += kv.value as i128;
    }
    let merged = tree_merge(
        comm,
        0,
        table,
        |w, k, s| {
            w.push_u64(k);
            w.push_i128(*s);
        },
        |r| (r.read_u64(), r.read_i128()),
        |a, b| *a += b,
    );
    let checked = merged.map(|m| {
        let mut out = BTreeMap::new();
        for (k, s) in m {
            match i64::try_from(s) {
                Ok(v) => {
                    out.insert(k, v);
                }
                Err(_) => return Err(k),
            }
        }
        Ok(out)
    });
    let verdict = checked.as_ref().map(|c| c.as_ref().map(|_| ()).map_err(|k| *k));
    match broadcast_verdict(comm, verdict) {
        Ok(()) => Ok(checked.map(|c| c.expect("verdict said ok"))),
        Err(key) => Err(DataOpError::SumOverflow { key }),
    }
}

/// Exact per-key (sum, count) pairs at PE 0; the average is the exact
/// rational sum/count and the counts double as its certificate.
pub fn average_aggregate(
    comm: &mut Comm,
    local: &[KeyValue],
) -> Result<Option<BTreeMap<u64, (i64, u64)>>, DataOpError> {
    let mut table: BTreeMap<u64, (i128, u64)> = BTreeMap::new();
    for kv in local {
        let e = table.entry(kv.key).or_insert((0, 0));
        e.0 += kv.value as i128;
        e.1 += 1;
    }
    let merged = tree_merge(
        comm,
        0,
        table,
        |w, k, (s, c)| {
            w.push_u64(k);
            w.push_i128(*s);
            w.push_u64(*c);
        },
        |r| (r.read_u64(), (r.read_i128(), r.read_u64())),
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
        },
    );
    let checked = merged.map(|m| {
        let mut out = BTreeMap::new();
        for (k, (s, c)) in m {
            match i64::try_from(s) {
                Ok(v) => {
                    out.insert(k, (v, c));
                }
                Err(_) => return Err(k),
            }
        }
        Ok(out)
    });
    let verdict = checked.as_ref().map(|c| c.as_ref().map(|_| ()).map_err(|k| *k));
    match broadcast_verdict(comm, verdict) {
        Ok(()) => Ok(checked.map(|c| c.expect("verdict said ok"))),
        Err(key) => Err(DataOpError::SumOverflow { key }),
    }
}

/// Per-key minima plus their locations, both replicated at every PE.
/// Ties break by (value, owner PE, local index).
pub fn min_aggregate(comm: &mut Comm, local: &[KeyValue]) -> (BTreeMap<u64, i64>, MinCertificate) {
    let mut table: BTreeMap<u64, (i64, u64, u64)> = BTreeMap::new();
    for (i, kv) in local.iter().enumerate() {
        let cand = (kv.value, comm.pe() as u64, i as u64);
        table
            .entry(kv.key)
            .and_modify(|best| {
                if cand < *best {
                    *best = cand;
                }
            })
            .or_insert(cand);
    }
    let merged = tree_merge(
        comm,
        0,
        table,
        |w, k, (v, owner, idx)| {
            w.push_u64(k);
            w.push_u64(*v as u64);
            w.push_u64(*owner);
            w.push_u64(*idx);
        },
        |r| (r.read_u64(), (r.read_u64() as i64, r.read_u64(), r.read_u64())),
        |a, b| {
            if b < *a {
                *a = b;
            }
        },
    );
    let payload = merged.map(|m| {
        let mut w = BitString::writer();
        for (k, (v, owner, _)) in &m {
            w.push_u64(*k);
            w.push_u64(*v as u64);
            w.push_bits(*owner, 16);
        }
        w.finish()
    });
    let bits = comm.broadcast_bits(payload, 0);
    let mut rd = bits.reader();
    let mut minima = BTreeMap::new();
    let mut locations = Vec::new();
    while rd.remaining() > 0 {
        let key = rd.read_u64();
        let min_value = rd.read_u64() as i64;
        let owner_pe = rd.read_bits(16) as usize;
        minima.insert(key, min_value);
        locations.push(MinLocation {
            key,
            owner_pe,
            min_value,
        });
    }
    (minima, MinCertificate { locations })
}

/// Exact per-key medians with tie-break certificate, replicated at
/// every PE. Routes (key, value, global index) triples to the key's
/// hash owner, computes exact medians locally, then broadcasts.
pub fn median_aggregate(
    comm: &mut Comm,
    local: &[KeyValue],
    route: &HashSpec,
) -> MedianAssertion {
    let p = comm.pes();
    let hasher = Hasher::new(*route);
    let base = comm.exclusive_prefix_sum(local.len() as u64);
    let mut outgoing: Vec<BitWriter> = (0..p).map(|_| BitString::writer()).collect();
    for (i, kv) in local.iter().enumerate() {
        let dest = (hasher.eval(kv.key) % p as u64) as usize;
        let w = &mut outgoing[dest];
        w.push_u64(kv.key);
        w.push_u64(kv.value as u64);
        w.push_u64(base + i as u64);
    }
    let incoming = comm.all_to_all(outgoing.into_iter().map(|w| w.finish()).collect());

    let mut groups: BTreeMap<u64, Vec<(i64, u64)>> = BTreeMap::new();
    for msg in incoming {
        let mut rd = msg.reader();
        while rd.remaining() > 0 {
            let key = rd.read_u64();
            let value = rd.read_u64() as i64;
            let gidx = rd.read_u64();
            groups.entry(key).or_default().push((value, gidx));
        }
    }

    let mut w = BitString::writer();
    for (key, mut vals) in groups {
        vals.sort_unstable();
        let n = vals.len();
        let pos = n / 2;
        let entry = if n % 2 == 1 {
            MedianEntry {
                num: vals[pos].0 as i128,
                den: 1,
                tie_break: 0,
            }
        } else {
            MedianEntry {
                num: vals[pos - 1].0 as i128 + vals[pos].0 as i128,
                den: 2,
                tie_break: 0,
            }
        };
        let tie_break = vals[..pos]
            .iter()
            .filter(|(v, _)| entry.cmp_value(*v).is_eq())
            .count() as u64;
        w.push_u64(key);
        w.push_i128(entry.num);
        w.push_bits(entry.den, 2);
        w.push_u64(tie_break);
    }

    let gathered = comm.gather_bits(w.finish(), 0);
    let payload = gathered.map(|chunks| {
        let mut all = BitString::writer();
        for c in chunks {
            all.push_payload(&c);
        }
        all.finish()
    });
    let bits = comm.broadcast_bits(payload, 0);
    let mut rd = bits.reader();
    let mut entries = BTreeMap::new();
    while rd.remaining() > 0 {
        let key = rd.read_u64();
        let num = rd.read_i128();
        let den = rd.read_bits(2);
        let tie_break = rd.read_u64();
        entries.insert(key, MedianEntry { num, den, tie_break });
    }
    MedianAssertion { entries }
}

fn pack_values(values: &[u64]) -> BitString {
    let mut w = BitString::writer();
    for &v in values {
        w.push_u64(v);
    }
    w.finish()
}

fn unpack_values(bits: &BitString) -> Vec<u64> {
    let mut rd = bits.reader();
    let mut out = Vec::with_capacity((bits.bit_len() / 64) as usize);
    while rd.remaining() > 0 {
        out.push(rd.read_u64());
    }
    out
}

/// Globally sorts a distributed word multiset: the concatenation over
/// pe order of the outputs is sorted, and no PE ends up with more than
/// twice the average load. Sample-partitioned for large inputs, root
/// sort for small ones.
pub fn sort(comm: &mut Comm, local: Vec<u64>) -> Vec<u64> {
    let p = comm.pes();
    let counts = allgather_counts(comm, local.len() as u64);
    let n: u64 = counts.iter().sum();
    let mut data = local;
    data.sort_unstable();
    if p == 1 {
        return data;
    }

    if n <= 32 * (p as u64) * (p as u64) {
        // Small input: PE 0 sorts everything and deals out even
        // contiguous chunks.
        let gathered = comm.gather_bits(pack_values(&data), 0);
        if let Some(chunks) = gathered {
            let mut all: Vec<u64> = chunks.iter().flat_map(unpack_values).collect();
            all.sort_unstable();
            let bound = |j: u64| ((j * n) / p as u64) as usize;
            for j in (1..p).rev() {
                let slice = &all[bound(j as u64)..bound(j as u64 + 1)];
                comm.send(j, pack_values(slice));
            }
            all.truncate(bound(1));
            return all;
        }
        return unpack_values(&comm.recv(0));
    }

    // Weighted regular sampling: each PE contributes the last element
    // of 32p even strata of its sorted run, tagged with the stratum
    // size, so cumulative sample weight bounds true global rank within
    // n/(32p) + p. That keeps every part under 2n/p.
    let base: u64 = counts[..comm.pe()].iter().sum();
    let s = (32 * p).min(data.len().max(1));
    let mut w = BitString::writer();
    if !data.is_empty() {
        let l = data.len();
        for j in 0..s {
            let end = (j + 1) * l / s;
            let start = j * l / s;
            if end > start {
                w.push_u64(data[end - 1]);
                w.push_u64(base + (end - 1) as u64);
                w.push_u64((end - start) as u64);
            }
        }
    }
    let gathered = comm.gather_bits(w.finish(), 0);
    let payload = gathered.map(|chunks| {
        let mut samples: Vec<(u64, u64, u64)> = Vec::new();
        for c in chunks {
            let mut rd = c.reader();
            while rd.remaining() > 0 {
                samples.push((rd.read_u64(), rd.read_u64(), rd.read_u64()));
            }
        }
        samples.sort_unstable();
        let mut splitters = BitString::writer();
        let mut cum = 0u64;
        let mut next = 1u64;
        for (v, g, weight) in samples {
            cum += weight;
            while next < p as u64 && cum >= next * n / p as u64 {
                splitters.push_u64(v);
                splitters.push_u64(g);
                next += 1;
            }
        }
        // Sampling covers the full weight, so all p-1 splitters exist.
        splitters.finish()
    });
    let bits = comm.broadcast_bits(payload, 0);
    let mut rd = bits.reader();
    let mut splitters = Vec::with_capacity(p - 1);
    while rd.remaining() > 0 {
        splitters.push((rd.read_u64(), rd.read_u64()));
    }

    let mut outgoing: Vec<Vec<u64>> = (0..p).map(|_| Vec::new()).collect();
    for (i, &v) in data.iter().enumerate() {
        let x = (v, base + i as u64);
        let part = splitters.partition_point(|sp| *sp <= x).min(p - 1);
        outgoing[part].push(v);
    }
    let incoming = comm.all_to_all(outgoing.iter().map(|run| pack_values(run)).collect());
    let mut out: Vec<u64> = incoming.iter().flat_map(unpack_values).collect();
    out.sort_unstable();
    out
}

/// Merges two sorted distributed sequences into one sorted sequence.
pub fn merge(comm: &mut Comm, s1: Vec<u64>, s2: Vec<u64>) -> Vec<u64> {
    let mut all = s1;
    all.extend(s2);
    sort(comm, all)
}

/// Multiset union: concatenates the global sequences and rebalances
/// contiguously so per-PE sizes differ by at most one.
pub fn union(comm: &mut Comm, s1: Vec<u64>, s2: Vec<u64>) -> Vec<u64> {
    let p = comm.pes();
    let mut data = s1;
    data.extend(s2);
    let counts = allgather_counts(comm, data.len() as u64);
    let n: u64 = counts.iter().sum();
    let base: u64 = counts[..comm.pe()].iter().sum();
    let bound = |j: u64| j * n / p as u64;
    let mut outgoing: Vec<Vec<u64>> = (0..p).map(|_| Vec::new()).collect();
    for (i, &v) in data.iter().enumerate() {
        let g = base + i as u64;
        let dest = (1..=p as u64).position(|j| g < bound(j)).expect("g < n");
        outgoing[dest].push(v);
    }
    let incoming = comm.all_to_all(outgoing.iter().map(|run| pack_values(run)).collect());
    incoming.iter().flat_map(unpack_values).collect()
}

/// Pairs the two sequences index-wise; the output lives in `s1`'s
/// distribution and preserves both component orders. Rejects unequal
/// global lengths uniformly at every PE.
pub fn zip(
    comm: &mut Comm,
    s1: Vec<u64>,
    s2: Vec<u64>,
) -> Result<Vec<(u64, u64)>, DataOpError> {
    let p = comm.pes();
    let counts1 = allgather_counts(comm, s1.len() as u64);
    let counts2 = allgather_counts(comm, s2.len() as u64);
    let n1: u64 = counts1.iter().sum();
    let n2: u64 = counts2.iter().sum();
    if n1 != n2 {
        return Err(DataOpError::ZipLengthMismatch { left: n1, right: n2 });
    }
    // Route s2 elements to the PE owning the same global index in
    // s1's layout; slot order then reassembles them in index order.
    let mut offsets1 = vec![0u64; p + 1];
    for i in 0..p {
        offsets1[i + 1] = offsets1[i] + counts1[i];
    }
    let base2: u64 = counts2[..comm.pe()].iter().sum();
    let mut outgoing: Vec<Vec<u64>> = (0..p).map(|_| Vec::new()).collect();
    for (i, &v) in s2.iter().enumerate() {
        let g = base2 + i as u64;
        let dest = offsets1.partition_point(|&o| o <= g) - 1;
        outgoing[dest].push(v);
    }
    let incoming = comm.all_to_all(outgoing.iter().map(|run| pack_values(run)).collect());
    let aligned: Vec<u64> = incoming.iter().flat_map(unpack_values).collect();
    assert_eq!(aligned.len(), s1.len(), "index routing is a bijection");
    Ok(s1.into_iter().zip(aligned).collect())
}

/// Moves every element to PE `eval_hash(key) mod p`; local order is
/// (key hash, key, arrival), so runs are reproducible.
pub fn groupby_redistribute(
    comm: &mut Comm,
    local: Vec<KeyValue>,
    spec: &HashSpec,
) -> Vec<KeyValue> {
    let p = comm.pes();
    let hasher = Hasher::new(*spec);
    let mut outgoing: Vec<BitWriter> = (0..p).map(|_| BitString::writer()).collect();
    for kv in &local {
        let dest = (hasher.eval(kv.key) % p as u64) as usize;
        let w = &mut outgoing[dest];
        w.push_u64(kv.key);
        w.push_u64(kv.value as u64);
    }
    let incoming = comm.all_to_all(outgoing.into_iter().map(|w| w.finish()).collect());
    let mut out: Vec<(u64, u64, usize, KeyValue)> = Vec::new();
    for msg in incoming {
        let mut rd = msg.reader();
        while rd.remaining() > 0 {
            let key = rd.read_u64();
            let value = rd.read_u64() as i64;
            out.push((hasher.eval(key), key, out.len(), KeyValue { key, value }));
        }
    }
    out.sort_unstable_by_key(|(h, k, arrival, _)| (*h, *k, *arrival));
    out.into_iter().map(|(_, _, _, kv)| kv).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinMode {
    Hash,
    SortMerge,
}

/// Co-partitions two relations by key: hash mode places each key at
/// its hash owner; sort-merge mode range-partitions by key, keeping
/// every key's copies on one PE and each relation locally key-sorted.
pub fn join_redistribute(
    comm: &mut Comm,
    r: Vec<KeyValue>,
    s: Vec<KeyValue>,
    mode: JoinMode,
    spec: &HashSpec,
) -> (Vec<KeyValue>, Vec<KeyValue>) {
    match mode {
        JoinMode::Hash => {
            let r2 = groupby_redistribute(comm, r, spec);
            let s2 = groupby_redistribute(comm, s, spec);
            (r2, s2)
        }
        JoinMode::SortMerge => {
            let splitters = key_splitters(comm, &r, &s);
            let r2 = exchange_by_key(comm, r, &splitters);
            let s2 = exchange_by_key(comm, s, &splitters);
            (r2, s2)
        }
    }
}

/// Key-granular range splitters over the combined key multiset, from
/// weighted regular samples; every copy of a key maps to one part.
fn key_splitters(comm: &mut Comm, r: &[KeyValue], s: &[KeyValue]) -> Vec<u64> {
    let p = comm.pes();
    let mut keys: Vec<u64> = r.iter().chain(s).map(|kv| kv.key).collect();
    keys.sort_unstable();
    let counts = allgather_counts(comm, keys.len() as u64);
    let n: u64 = counts.iter().sum();
    let cap = (32 * p).min(keys.len().max(1));
    let mut w = BitString::writer();
    if !keys.is_empty() {
        let l = keys.len();
        for j in 0..cap {
            let end = (j + 1) * l / cap;
            let start = j * l / cap;
            if end > start {
                w.push_u64(keys[end - 1]);
                w.push_u64((end - start) as u64);
            }
        }
    }
    let gathered = comm.gather_bits(w.finish(), 0);
    let payload = gathered.map(|chunks| {
        let mut samples: Vec<(u64, u64)> = Vec::new();
        for c in chunks {
            let mut rd = c.reader();
            while rd.remaining() > 0 {
                samples.push((rd.read_u64(), rd.read_u64()));
            }
        }
        samples.sort_unstable();
        let mut out = BitString::writer();
        let mut cum = 0u64;
        let mut next = 1u64;
        let mut last: Option<u64> = None;
        for (k, weight) in samples {
            cum += weight;
            while next < p as u64 && cum >= next * n / p as u64 {
                if last != Some(k) {
                    out.push_u64(k);
                    last = Some(k);
                }
                next += 1;
            }
        }
        out.finish()
    });
    let bits = comm.broadcast_bits(payload, 0);
    unpack_values(&bits)
}

fn exchange_by_key(comm: &mut Comm, rel: Vec<KeyValue>, splitters: &[u64]) -> Vec<KeyValue> {
    let p = comm.pes();
    let mut outgoing: Vec<BitWriter> = (0..p).map(|_| BitString::writer()).collect();
    for kv in &rel {
        let dest = splitters.partition_point(|sp| *sp < kv.key).min(p - 1);
        let w = &mut outgoing[dest];
        w.push_u64(kv.key);
        w.push_u64(kv.value as u64);
    }
    let incoming = comm.all_to_all(outgoing.into_iter().map(|w| w.finish()).collect());
    let mut out: Vec<(u64, i64, usize)> = Vec::new();
    for msg in incoming {
        let mut rd = msg.reader();
        while rd.remaining() > 0 {
            let key = rd.read_u64();
            let value = rd.read_u64() as i64;
            out.push((key, value, out.len()));
        }
    }
    out.sort_unstable();
    out.into_iter()
        .map(|(key, value, _)| KeyValue { key, value })
        .collect()
}
