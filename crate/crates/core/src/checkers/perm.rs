//! Permutation-style checkers: hashed multiset differences,
//! characteristic polynomials over a prime field, order and placement
//! verification, and positional fingerprints.

use super::{
    combine_rejections, CheckError, IterationHashes, PairHashes, PermCheckConfig, RejectReason,
    Verdict,
};
use crate::dataops::{JoinMode, KeyValue};
use crate::hashing::{HashSpec, Hasher};
use crate::simnet::{ceil_log2, BitString, Comm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which permutation checker backs an order-sensitive check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PermVariant {
    /// Hashed multiset difference; cheap, needs a trusted hash family.
    Hash(PermCheckConfig),
    /// Characteristic polynomial over a prime field; hash-free.
    Poly { delta: f64, seed: u64 },
}

#[inline]
fn mask_of(bits: u32) -> u64 {
    if bits == 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

fn lambda_verdict(totals: &[u64], iterations: u32) -> Verdict {
    match totals.iter().position(|&l| l != 0) {
        None => Verdict::accept(),
        Some(i) => Verdict::reject_at(
            RejectReason::PermutationMismatch,
            Some((i as u32 % iterations) as u16),
            Some(i as u32 / iterations),
            None,
        ),
    }
}

fn fold_lambda(
    lam: &mut [u64],
    ih: &IterationHashes,
    mask: u64,
    seq: &[u64],
    negate: bool,
    scratch: &mut Vec<u64>,
) {
    let its = lam.len() as u32;
    for &e in seq {
        scratch.clear();
        ih.slices_into(e, its, scratch);
        for (it, &s) in scratch.iter().enumerate() {
            lam[it] = if negate {
                lam[it].wrapping_sub(s) & mask
            } else {
                lam[it].wrapping_add(s) & mask
            };
        }
    }
}

fn hashed_multiset_difference(
    comm: &mut Comm,
    plus: &[&[u64]],
    minus: &[&[u64]],
    config: &PermCheckConfig,
) -> Result<Verdict, CheckError> {
    config.validate()?;
    let ih = IterationHashes::new(config.hash, config.iterations, config.bits_h)?;
    let mask = mask_of(config.bits_h);
    let mut lam = vec![0u64; config.iterations as usize];
    let mut scratch = Vec::with_capacity(lam.len());
    for seq in plus {
        fold_lambda(&mut lam, &ih, mask, seq, false, &mut scratch);
    }
    for seq in minus {
        fold_lambda(&mut lam, &ih, mask, seq, true, &mut scratch);
    }
    let totals = comm.all_reduce_vec(lam, config.bits_h, |_, a, b| a.wrapping_add(b) & mask);
    Ok(lambda_verdict(&totals, config.iterations))
}

/// Hashed multiset equality of two distributed sequences: sums
/// h(e) - h(o) per iteration mod 2^bits_h and accepts iff every sum
/// is zero. A differing multiset survives one iteration with
/// probability 2^-bits_h.
pub fn check_permutation_hash(
    comm: &mut Comm,
    elems: &[u64],
    others: &[u64],
    config: &PermCheckConfig,
) -> Result<Verdict, CheckError> {
    hashed_multiset_difference(comm, &[elems], &[others], config)
}

fn fold_lambda_pairs(lam: &mut [u64], ph: &PairHashes, mask: u64, seq: &[KeyValue], negate: bool) {
    let its = lam.len() as u32;
    for kv in seq {
        for it in 0..its {
            let s = ph.slice(kv.key, kv.value as u64, it);
            lam[it as usize] = if negate {
                lam[it as usize].wrapping_sub(s) & mask
            } else {
                lam[it as usize].wrapping_add(s) & mask
            };
        }
    }
}

/// Hashed multiset equality over (key, value) pairs; swapping values
/// between keys changes the pair hash even though the key and value
/// multisets are separately preserved.
pub fn check_permutation_hash_pairs(
    comm: &mut Comm,
    elems: &[KeyValue],
    others: &[KeyValue],
    config: &PermCheckConfig,
) -> Result<Verdict, CheckError> {
    config.validate()?;
    let ph = PairHashes::new(config.hash, config.iterations, config.bits_h)?;
    let mask = mask_of(config.bits_h);
    let mut lam = vec![0u64; config.iterations as usize];
    fold_lambda_pairs(&mut lam, &ph, mask, elems, false);
    fold_lambda_pairs(&mut lam, &ph, mask, others, true);
    let totals = comm.all_reduce_vec(lam, config.bits_h, |_, a, b| a.wrapping_add(b) & mask);
    Ok(lambda_verdict(&totals, config.iterations))
}

pub(crate) const MERSENNE61: u64 = (1 << 61) - 1;

#[inline]
fn mulmod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn powmod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mulmod(acc, base, m);
        }
        base = mulmod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin; the 12 smallest prime bases decide
/// primality for every 64-bit integer.
pub(crate) fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n % p == 0 {
            return false;
        }
    }
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest prime >= min_r, preferring the Mersenne prime 2^61-1 when
/// it qualifies (fast modular arithmetic, no search).
pub(crate) fn select_prime(min_r: u64) -> Result<u64, CheckError> {
    if min_r <= MERSENNE61 {
        return Ok(MERSENNE61);
    }
    let mut c = min_r | 1;
    loop {
        if is_prime_u64(c) {
            return Ok(c);
        }
        c = c.checked_add(2).ok_or(CheckError::PrimeRangeExceeded)?;
    }
}

enum PolyParams {
    Adaptive { delta: f64, seed: u64 },
    Fixed { r: u64, z: u64 },
}

fn poly_multiset_difference(
    comm: &mut Comm,
    plus: &[&[u64]],
    minus: &[&[u64]],
    params: &PolyParams,
) -> Result<Verdict, CheckError> {
    let local_len = |side: &[&[u64]]| side.iter().map(|s| s.len() as u64).sum::<u64>();
    let local_max = plus
        .iter()
        .chain(minus)
        .flat_map(|s| s.iter().copied())
        .max()
        .unwrap_or(0);
    let stats = comm.all_reduce_vec(
        vec![local_len(plus), local_len(minus), local_max],
        64,
        |i, a, b| if i < 2 { a + b } else { a.max(b) },
    );
    let (n_plus, n_minus, global_max) = (stats[0], stats[1], stats[2]);

    let (r, z) = match params {
        PolyParams::Fixed { r, z } => {
            if *r < 2 || z >= r {
                return Err(CheckError::BadConfig(format!(
                    "need a modulus >= 2 and z < modulus, got r={r} z={z}"
                )));
            }
            if global_max >= *r {
                return Err(CheckError::UniverseExceeded {
                    value: global_max,
                    bound: *r,
                });
            }
            (*r, *z)
        }
        PolyParams::Adaptive { delta, seed } => {
            if !(*delta > 0.0 && *delta < 1.0) {
                return Err(CheckError::BadConfig(format!(
                    "failure bound {delta} outside (0, 1)"
                )));
            }
            let quota = (n_plus.max(n_minus) as f64 / delta).floor();
            if !quota.is_finite() || quota >= u64::MAX as f64 {
                return Err(CheckError::PrimeRangeExceeded);
            }
            let min_r = (quota as u64 + 1).max(
                global_max
                    .checked_add(1)
                    .ok_or(CheckError::PrimeRangeExceeded)?,
            );
            let r = select_prime(min_r)?;
            let z_width = 64 - (r - 1).leading_zeros();
            let z = comm.broadcast_words(
                (comm.pe() == 0).then(|| {
                    vec![ChaCha8Rng::seed_from_u64(*seed).gen_range(0..r)]
                }),
                z_width,
                0,
            )[0];
            (r, z)
        }
    };

    if n_plus != n_minus {
        return Ok(Verdict::reject(RejectReason::LengthMismatch));
    }

    let product = |side: &[&[u64]]| {
        side.iter()
            .flat_map(|s| s.iter())
            .fold(1 % r, |acc, &e| mulmod(acc, (z + r - e) % r, r))
    };
    let w = 64 - (r - 1).leading_zeros();
    let prods = comm.all_reduce_vec(vec![product(plus), product(minus)], w, |_, a, b| {
        mulmod(a, b, r)
    });
    Ok(if prods[0] == prods[1] {
        Verdict::accept()
    } else {
        Verdict::reject(RejectReason::PolynomialMismatch)
    })
}

/// Characteristic-polynomial permutation check: compares the products
/// of (z - e) over both sequences mod a prime r > max(n/delta, max
/// element) at a z drawn on PE 0. A wrong multiset is accepted with
/// probability < n/r <= delta; no hash function is involved.
pub fn check_permutation_poly(
    comm: &mut Comm,
    elems: &[u64],
    others: &[u64],
    delta: f64,
    seed: u64,
) -> Result<Verdict, CheckError> {
    poly_multiset_difference(comm, &[elems], &[others], &PolyParams::Adaptive { delta, seed })
}

/// Polynomial check at a caller-chosen prime r and evaluation point z
/// (identical at every PE), exposing the per-z accept decision.
pub fn check_permutation_poly_fixed(
    comm: &mut Comm,
    elems: &[u64],
    others: &[u64],
    r: u64,
    z: u64,
) -> Result<Verdict, CheckError> {
    poly_multiset_difference(comm, &[elems], &[others], &PolyParams::Fixed { r, z })
}

/// Minimum over all successor PEs' values: a dissemination scan over
/// (present, min) in ceil(log2 p) rounds, so runs of empty PEs cannot
/// hide an out-of-order boundary.
fn successor_min(comm: &mut Comm, local_min: Option<u64>) -> Option<u64> {
    let p = comm.pes();
    let pe = comm.pe();
    let encode = |v: Option<u64>| {
        let mut w = BitString::writer();
        match v {
            Some(x) => {
                w.push_bits(1, 1);
                w.push_u64(x);
            }
            None => w.push_bits(0, 1),
        }
        w.finish()
    };
    let merge = |a: Option<u64>, b: Option<u64>| match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    };
    // Inclusive window [pe, pe + 2^round) travels left; the exclusive
    // union over rounds covers exactly (pe, p).
    let mut incl = local_min;
    let mut excl = None;
    for round in 0..ceil_log2(p) {
        let dist = 1usize << round;
        if pe >= dist {
            comm.send(pe - dist, encode(incl));
        }
        if pe + dist < p {
            let msg = comm.recv(pe + dist);
            let mut rd = msg.reader();
            let got = (rd.read_bits(1) == 1).then(|| rd.read_u64());
            excl = merge(excl, got);
            incl = merge(incl, got);
        }
    }
    excl
}

/// Local ascending scan plus the cross-PE boundary comparison; ties
/// are legal, an empty PE imposes no constraint.
fn order_violation(comm: &mut Comm, output: &[u64]) -> Option<RejectReason> {
    let locally_sorted = output.windows(2).all(|w| w[0] <= w[1]);
    let succ_min = successor_min(comm, output.iter().copied().min());
    let boundary_ok = match (output.iter().copied().max(), succ_min) {
        (Some(local_max), Some(smin)) => local_max <= smin,
        _ => true,
    };
    if !locally_sorted {
        Some(RejectReason::NotSorted)
    } else if !boundary_ok {
        Some(RejectReason::BoundaryOrder)
    } else {
        None
    }
}

fn perm_step(
    comm: &mut Comm,
    plus: &[&[u64]],
    minus: &[&[u64]],
    variant: &PermVariant,
) -> Result<Verdict, CheckError> {
    match variant {
        PermVariant::Hash(config) => hashed_multiset_difference(comm, plus, minus, config),
        PermVariant::Poly { delta, seed } => poly_multiset_difference(
            comm,
            plus,
            minus,
            &PolyParams::Adaptive {
                delta: *delta,
                seed: *seed,
            },
        ),
    }
}

/// Sort check: the output must be a permutation of the input, locally
/// ascending, and ascending across PE boundaries in pe order.
pub fn check_sorted(
    comm: &mut Comm,
    elems: &[u64],
    output: &[u64],
    variant: &PermVariant,
) -> Result<Verdict, CheckError> {
    let perm = perm_step(comm, &[output], &[elems], variant)?;
    let violation = order_violation(comm, output);
    let order = combine_rejections(comm, violation);
    Ok(if !order.accepted { order } else { perm })
}

/// Union check: the output is a permutation of the concatenation of
/// both inputs; no order is imposed.
pub fn check_union(
    comm: &mut Comm,
    s1: &[u64],
    s2: &[u64],
    output: &[u64],
    variant: &PermVariant,
) -> Result<Verdict, CheckError> {
    perm_step(comm, &[output], &[s1, s2], variant)
}

/// Merge check: union plus global sortedness of the output.
pub fn check_merge(
    comm: &mut Comm,
    s1: &[u64],
    s2: &[u64],
    output: &[u64],
    variant: &PermVariant,
) -> Result<Verdict, CheckError> {
    let perm = perm_step(comm, &[output], &[s1, s2], variant)?;
    let violation = order_violation(comm, output);
    let order = combine_rejections(comm, violation);
    Ok(if !order.accepted { order } else { perm })
}

/// Positional fingerprint check of zip: compares sum of
/// index_hash(i) * x_i mod 2^bits_h between each input sequence and
/// the matching component of the asserted output, for all iterations
/// in one combine. Rejects a global length mismatch deterministically.
pub fn check_zip(
    comm: &mut Comm,
    s1: &[u64],
    s2: &[u64],
    zipped: &[(u64, u64)],
    config: &PermCheckConfig,
) -> Result<Verdict, CheckError> {
    config.validate()?;
    let lens = comm.all_reduce_vec(
        vec![s1.len() as u64, s2.len() as u64, zipped.len() as u64],
        64,
        |_, a, b| a + b,
    );
    if lens[0] != lens[2] || lens[1] != lens[2] {
        return Ok(Verdict::reject(RejectReason::LengthMismatch));
    }
    let offsets = [
        comm.exclusive_prefix_sum(s1.len() as u64),
        comm.exclusive_prefix_sum(s2.len() as u64),
        comm.exclusive_prefix_sum(zipped.len() as u64),
    ];

    let its = config.iterations as usize;
    let ih = IterationHashes::new(config.hash, config.iterations, config.bits_h)?;
    let mask = mask_of(config.bits_h);
    // Layout: fp[it * 4 + c], components 0: s1, 1: s2, 2: zipped
    // firsts, 3: zipped seconds.
    let mut fp = vec![0u64; its * 4];
    let mut scratch = Vec::with_capacity(its);
    let add = |fp: &mut [u64], scratch: &mut Vec<u64>, index: u64, c: usize, x: u64| {
        scratch.clear();
        ih.slices_into(index, its as u32, scratch);
        for (it, &m) in scratch.iter().enumerate() {
            fp[it * 4 + c] = fp[it * 4 + c].wrapping_add(m.wrapping_mul(x)) & mask;
        }
    };
    for (j, &x) in s1.iter().enumerate() {
        add(&mut fp, &mut scratch, offsets[0] + j as u64, 0, x);
    }
    for (j, &x) in s2.iter().enumerate() {
        add(&mut fp, &mut scratch, offsets[1] + j as u64, 1, x);
    }
    for (j, &(a, b)) in zipped.iter().enumerate() {
        let i = offsets[2] + j as u64;
        add(&mut fp, &mut scratch, i, 2, a);
        add(&mut fp, &mut scratch, i, 3, b);
    }
    let totals = comm.all_reduce_vec(fp, config.bits_h, |_, a, b| a.wrapping_add(b) & mask);
    for it in 0..its {
        for c in 0..2 {
            if totals[it * 4 + c] != totals[it * 4 + c + 2] {
                return Ok(Verdict::reject_at(
                    RejectReason::FingerprintMismatch,
                    Some(it as u16),
                    Some(c as u32),
                    None,
                ));
            }
        }
    }
    Ok(Verdict::accept())
}

/// Group-by redistribution check: pair-hashed permutation of the
/// elements plus a deterministic local assertion that every element
/// sits on its hash owner.
pub fn check_groupby_redistribution(
    comm: &mut Comm,
    input: &[KeyValue],
    redistributed: &[KeyValue],
    config: &PermCheckConfig,
    ownership: &HashSpec,
) -> Result<Verdict, CheckError> {
    let perm = check_permutation_hash_pairs(comm, redistributed, input, config)?;
    let hasher = Hasher::new(*ownership);
    let p = comm.pes() as u64;
    let misplaced = redistributed
        .iter()
        .any(|kv| hasher.eval(kv.key) % p != comm.pe() as u64);
    let placement = combine_rejections(comm, misplaced.then_some(RejectReason::WrongOwner));
    Ok(if !placement.accepted { placement } else { perm })
}

/// Join redistribution check: both relations are pair-hashed
/// permutations of their inputs; hash mode asserts hash ownership
/// (which co-partitions by construction), sort-merge mode asserts
/// per-relation key order plus strict key separation between PEs, so
/// no key straddles a boundary.
pub fn check_join_redistribution(
    comm: &mut Comm,
    r_in: &[KeyValue],
    s_in: &[KeyValue],
    r_out: &[KeyValue],
    s_out: &[KeyValue],
    mode: JoinMode,
    route: &HashSpec,
    config: &PermCheckConfig,
) -> Result<Verdict, CheckError> {
    config.validate()?;
    let ph = PairHashes::new(config.hash, config.iterations, config.bits_h)?;
    let mask = mask_of(config.bits_h);
    let its = config.iterations as usize;
    let mut lam = vec![0u64; 2 * its];
    fold_lambda_pairs(&mut lam[..its], &ph, mask, r_out, false);
    fold_lambda_pairs(&mut lam[..its], &ph, mask, r_in, true);
    fold_lambda_pairs(&mut lam[its..], &ph, mask, s_out, false);
    fold_lambda_pairs(&mut lam[its..], &ph, mask, s_in, true);
    let totals = comm.all_reduce_vec(lam, config.bits_h, |_, a, b| a.wrapping_add(b) & mask);
    let perm = match totals.iter().position(|&l| l != 0) {
        None => Verdict::accept(),
        Some(i) => Verdict::reject_at(
            RejectReason::PermutationMismatch,
            Some((i % its) as u16),
            Some((i / its) as u32),
            None,
        ),
    };

    let local = match mode {
        JoinMode::Hash => {
            let hasher = Hasher::new(*route);
            let p = comm.pes() as u64;
            let misplaced = r_out
                .iter()
                .chain(s_out)
                .any(|kv| hasher.eval(kv.key) % p != comm.pe() as u64);
            misplaced.then_some(RejectReason::WrongOwner)
        }
        JoinMode::SortMerge => {
            let key_sorted = |rel: &[KeyValue]| rel.windows(2).all(|w| w[0].key <= w[1].key);
            let local_min = r_out
                .iter()
                .chain(s_out)
                .map(|kv| kv.key)
                .min();
            let local_max = r_out
                .iter()
                .chain(s_out)
                .map(|kv| kv.key)
                .max();
            let smin = successor_min(comm, local_min);
            // Strict: a key on two PEs would lose join partners.
            let separated = match (local_max, smin) {
                (Some(mx), Some(mn)) => mx < mn,
                _ => true,
            };
            if !key_sorted(r_out) || !key_sorted(s_out) {
                Some(RejectReason::NotSorted)
            } else if !separated {
                Some(RejectReason::BoundaryOrder)
            } else {
                None
            }
        }
    };
    let placement = combine_rejections(comm, local);
    Ok(if !placement.accepted { placement } else { perm })
}
