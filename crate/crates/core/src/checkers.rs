//! Communication-efficient checkers for distributed operations.
//!
//! Each checker consumes an operation's input and asserted output
//! (both distributed) and returns the same [`Verdict`] at every PE.
//! All checkers are one-sided: a correct result is never rejected;
//! a wrong one slips through with a bounded, configurable probability.
//! Their communication volume depends on the configuration, never on
//! the data size.

mod perm;
mod sum;

pub use perm::{
    check_groupby_redistribution, check_join_redistribution, check_merge, check_permutation_hash,
    check_permutation_hash_pairs, check_permutation_poly, check_permutation_poly_fixed,
    check_sorted, check_union, check_zip, PermVariant,
};
pub use sum::{
    check_average, check_count_agg, check_median, check_min, check_sum_agg, condensed_reduce,
    sum_tables_match, AverageEntry,
};

use crate::hashing::{splitmix64, HashSpec, Hasher, SlicePlan};
use crate::simnet::{BitString, Comm};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Result of a check, identical at every PE of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub detail: Option<VerdictDetail>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictDetail {
    pub reason: RejectReason,
    pub iteration: Option<u16>,
    pub index: Option<u32>,
    pub pe: Option<u16>,
}

impl Verdict {
    pub fn accept() -> Self {
        Verdict {
            accepted: true,
            detail: None,
        }
    }

    pub fn reject(reason: RejectReason) -> Self {
        Verdict {
            accepted: false,
            detail: Some(VerdictDetail {
                reason,
                iteration: None,
                index: None,
                pe: None,
            }),
        }
    }

    fn reject_at(reason: RejectReason, iteration: Option<u16>, index: Option<u32>, pe: Option<u16>) -> Self {
        Verdict {
            accepted: false,
            detail: Some(VerdictDetail {
                reason,
                iteration,
                index,
                pe,
            }),
        }
    }

    /// Fixed-width wire form: 1 accept bit, then on rejection a
    /// 4-bit reason and three optional fields.
    fn encode(&self) -> BitString {
        let mut w = BitString::writer();
        w.push_bits(self.accepted as u64, 1);
        if let Some(d) = &self.detail {
            w.push_bits(d.reason.code(), 4);
            push_opt(&mut w, d.iteration.map(u64::from), 16);
            push_opt(&mut w, d.index.map(u64::from), 32);
            push_opt(&mut w, d.pe.map(u64::from), 16);
        }
        w.finish()
    }

    fn decode(bits: &BitString) -> Self {
        let mut r = bits.reader();
        if r.read_bits(1) == 1 {
            return Verdict::accept();
        }
        let reason = RejectReason::from_code(r.read_bits(4));
        let iteration = read_opt(&mut r, 16).map(|v| v as u16);
        let index = read_opt(&mut r, 32).map(|v| v as u32);
        let pe = read_opt(&mut r, 16).map(|v| v as u16);
        Verdict {
            accepted: false,
            detail: Some(VerdictDetail {
                reason,
                iteration,
                index,
                pe,
            }),
        }
    }
}

fn push_opt(w: &mut crate::simnet::BitWriter, v: Option<u64>, width: u32) {
    match v {
        Some(v) => {
            w.push_bits(1, 1);
            w.push_bits(v, width);
        }
        None => w.push_bits(0, 1),
    }
}

fn read_opt(r: &mut crate::simnet::BitReader, width: u32) -> Option<u64> {
    (r.read_bits(1) == 1).then(|| r.read_bits(width))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    /// A condensed-reduction table differs between input and output.
    TableMismatch,
    /// An inner-product fingerprint differs between sides.
    FingerprintMismatch,
    /// Characteristic-polynomial products differ.
    PolynomialMismatch,
    /// A hashed multiset difference is nonzero.
    PermutationMismatch,
    /// Global sequence lengths disagree.
    LengthMismatch,
    /// A local run is out of order.
    NotSorted,
    /// Neighboring PEs hold out-of-order boundary elements.
    BoundaryOrder,
    /// An input element lies below its key's asserted minimum.
    BelowAssertedMin,
    /// An input key is absent from the asserted output.
    MissingKey,
    /// Certificate and output key sets disagree.
    CertificateMismatch,
    /// A certificate entry's owner cannot produce the element.
    PhantomCertificate,
    /// Purported replicas differ across PEs.
    ReplicaMismatch,
    /// Asserted average times count is not an integer.
    NonIntegralAverage,
    /// An element resides on a PE other than its hash owner.
    WrongOwner,
}

impl RejectReason {
    fn code(self) -> u64 {
        self as u64
    }

    fn from_code(code: u64) -> Self {
        use RejectReason::*;
        const ALL: [RejectReason; 14] = [
            TableMismatch,
            FingerprintMismatch,
            PolynomialMismatch,
            PermutationMismatch,
            LengthMismatch,
            NotSorted,
            BoundaryOrder,
            BelowAssertedMin,
            MissingKey,
            CertificateMismatch,
            PhantomCertificate,
            ReplicaMismatch,
            NonIntegralAverage,
            WrongOwner,
        ];
        ALL[code as usize]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckError {
    #[error("invalid checker configuration: {0}")]
    BadConfig(String),
    #[error("element {value} is outside the checkable universe (needs < {bound})")]
    UniverseExceeded { value: u64, bound: u64 },
    #[error("required modulus exceeds the 64-bit prime range")]
    PrimeRangeExceeded,
}

/// Configuration of the condensed-reduction sum checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumCheckConfig {
    pub iterations: u32,
    /// Buckets per table.
    pub d: u64,
    /// Moduli are drawn uniformly from (rhat, 2*rhat].
    pub rhat: u64,
    pub hash: HashSpec,
    pub modulus_seed: u64,
}

impl SumCheckConfig {
    pub(crate) fn validate(&self) -> Result<(), CheckError> {
        if self.iterations == 0 {
            return Err(CheckError::BadConfig("iterations must be >= 1".into()));
        }
        if self.d < 2 {
            return Err(CheckError::BadConfig("need at least 2 buckets".into()));
        }
        if self.rhat < self.d {
            return Err(CheckError::BadConfig(format!(
                "rhat {} must be >= bucket count {}",
                self.rhat, self.d
            )));
        }
        if self.rhat > 1 << 62 {
            return Err(CheckError::BadConfig("rhat above 2^62".into()));
        }
        Ok(())
    }

    /// Wire width of one table entry: residues are < 2*rhat.
    pub fn entry_bits(&self) -> u32 {
        64 - (2 * self.rhat - 1).leading_zeros()
    }
}

/// Configuration of hash-fingerprint permutation style checkers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermCheckConfig {
    /// Fingerprints live in Z_(2^bits_h).
    pub bits_h: u32,
    pub iterations: u32,
    pub hash: HashSpec,
}

impl PermCheckConfig {
    pub(crate) fn validate(&self) -> Result<(), CheckError> {
        if self.iterations == 0 {
            return Err(CheckError::BadConfig("iterations must be >= 1".into()));
        }
        if self.bits_h == 0 || self.bits_h > self.hash.family.output_bits() {
            return Err(CheckError::BadConfig(format!(
                "bits_h {} outside 1..={}",
                self.bits_h,
                self.hash.family.output_bits()
            )));
        }
        Ok(())
    }
}

const GROUP_SALT: u64 = 0x715e_c8a7_33b1_9d4f;
const VALUE_SALT: u64 = 0x0b4f_92d3_6a58_e17c;

/// Per-iteration hash slices: one evaluation feeds as many iterations
/// as fit in the output width; further iterations come from extra
/// derived functions. Group 0 is exactly the base function.
pub struct IterationHashes {
    hashers: Vec<Hasher>,
    key_mul: Vec<u64>,
    plan: SlicePlan,
    per_group: u32,
}

impl IterationHashes {
    pub fn new(spec: HashSpec, iterations: u32, slice_bits: u32) -> Result<Self, CheckError> {
        let out_bits = spec.family.output_bits();
        if slice_bits == 0 || slice_bits > out_bits {
            return Err(CheckError::BadConfig(format!(
                "slice width {slice_bits} outside 1..={out_bits}"
            )));
        }
        let per_group = out_bits / slice_bits;
        let groups = iterations.div_ceil(per_group).max(1);
        let mut hashers = Vec::with_capacity(groups as usize);
        let mut key_mul = Vec::with_capacity(groups as usize);
        for g in 0..groups {
            if g == 0 {
                hashers.push(Hasher::new(spec));
                key_mul.push(1);
            } else {
                // Tabulation families decorrelate through reseeding;
                // CRC ignores seeds (it is a fixed GF(2)-affine map,
                // so XOR masks would not decorrelate either) and gets
                // an odd key multiplier instead, a bijection on keys.
                let derived = splitmix64(spec.seed ^ GROUP_SALT.wrapping_add(g as u64));
                hashers.push(Hasher::new(HashSpec {
                    family: spec.family,
                    seed: derived,
                }));
                key_mul.push(splitmix64(derived ^ GROUP_SALT) | 1);
            }
        }
        let plan = SlicePlan::new(per_group, slice_bits, out_bits)
            .map_err(|e| CheckError::BadConfig(e.to_string()))?;
        Ok(IterationHashes {
            hashers,
            key_mul,
            plan,
            per_group,
        })
    }

    /// Number of evaluation groups backing the iterations.
    pub fn groups(&self) -> usize {
        self.hashers.len()
    }

    /// The `iteration`-th slice for `key`.
    #[inline]
    pub fn slice(&self, key: u64, iteration: u32) -> u64 {
        let g = (iteration / self.per_group) as usize;
        let s = iteration % self.per_group;
        let h = self.hashers[g].eval(key.wrapping_mul(self.key_mul[g]));
        self.plan.slice(h, s)
    }

    /// All slices for `key`, one evaluation per group, appended to
    /// `out` in iteration order (length `iterations`).
    #[inline]
    pub fn slices_into(&self, key: u64, iterations: u32, out: &mut Vec<u64>) {
        let mut it = 0;
        for g in 0..self.hashers.len() {
            let h = self.hashers[g].eval(key.wrapping_mul(self.key_mul[g]));
            let mut s = 0;
            while s < self.per_group && it < iterations {
                out.push(self.plan.slice(h, s));
                s += 1;
                it += 1;
            }
        }
    }
}

/// Hashes (key, value) pairs by combining two independently derived
/// per-iteration functions, so neither component alone cancels.
pub struct PairHashes {
    keys: IterationHashes,
    values: IterationHashes,
}

impl PairHashes {
    pub fn new(spec: HashSpec, iterations: u32, slice_bits: u32) -> Result<Self, CheckError> {
        let keys = IterationHashes::new(spec, iterations, slice_bits)?;
        let value_spec = HashSpec {
            family: spec.family,
            seed: splitmix64(spec.seed ^ VALUE_SALT),
        };
        let values = IterationHashes::new(value_spec, iterations, slice_bits)?;
        Ok(PairHashes { keys, values })
    }

    #[inline]
    pub fn slice(&self, key: u64, value: u64, iteration: u32) -> u64 {
        self.keys.slice(key, iteration) ^ self.values.slice(value, iteration)
    }
}

/// Deterministic fixed function for hashing replicated structures.
pub(crate) const REPLICA_HASH: HashSpec = HashSpec {
    family: crate::hashing::HashFamily::Tab64,
    seed: 0x9067_7a5f_31c4_8be2,
};

/// 64-bit chained digest of a bit-string under the given function.
pub fn digest_bits(hash: &HashSpec, bits: &BitString) -> u64 {
    let hasher = Hasher::new(*hash);
    let mut state = hasher.eval(bits.bit_len());
    let mut r = bits.reader();
    let mut left = bits.bit_len();
    while left >= 64 {
        state = hasher.eval(state ^ r.read_u64());
        left -= 64;
    }
    if left > 0 {
        state = hasher.eval(state ^ r.read_bits(left as u32));
    }
    state
}

/// Verifies that every PE holds the same replica: PE 0 broadcasts its
/// digest and mismatches are combined. A differing replica escapes
/// detection only on a 64-bit digest collision.
pub fn replica_consistency(comm: &mut Comm, copy: &BitString, hash: &HashSpec) -> Verdict {
    let digest = digest_bits(hash, copy);
    let reference = comm.broadcast_words((comm.pe() == 0).then(|| vec![digest]), 64, 0)[0];
    let mismatch = (digest != reference).then_some(RejectReason::ReplicaMismatch);
    combine_rejections(comm, mismatch)
}

/// Folds per-PE local rejections into one Verdict, identical at every
/// PE; the lowest (reason, pe) pair wins so the detail is
/// deterministic.
pub(crate) fn combine_rejections(comm: &mut Comm, local: Option<RejectReason>) -> Verdict {
    let word = match local {
        None => u64::MAX,
        Some(reason) => (reason.code() << 16) | comm.pe() as u64,
    };
    let min = comm.all_reduce_vec(vec![word], 64, |_, a, b| a.min(b))[0];
    if min == u64::MAX {
        Verdict::accept()
    } else {
        Verdict::reject_at(
            RejectReason::from_code(min >> 16),
            None,
            None,
            Some((min & 0xFFFF) as u16),
        )
    }
}

/// Broadcasts the root's verdict so every PE returns the same one.
pub(crate) fn broadcast_verdict(comm: &mut Comm, at_root: Option<Verdict>) -> Verdict {
    let payload = at_root.map(|v| v.encode());
    let bits = comm.broadcast_bits(payload, 0);
    Verdict::decode(&bits)
}

/// Slice width used to map hashes to buckets 1..=d: exact for powers
/// of two, two guard bits against modulo bias otherwise.
pub(crate) fn bucket_slice_bits(d: u64) -> u32 {
    if d.is_power_of_two() {
        d.trailing_zeros().max(1)
    } else {
        (64 - d.leading_zeros()) + 2
    }
}
