//! Synthetic experiment inputs: power-law-distributed keys, uniform
//! integers, and round-robin dealing across PEs.
//!
//! Power-law draws are inverse-CDF samples against the harmonic
//! cumulative weights H_k / H_N (rank k has frequency 1/(k·H_N)).
//! H_k is an exact precomputed table for k < 64 and an asymptotic
//! expansion beyond (error < 1e-13 there, orders of magnitude below
//! the 1/k weight of any single rank); a final bracket walk lands
//! every draw on exactly the rank whose cumulative bracket contains
//! it, so draws match a cumulative-table binary search rank for rank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const EXACT_HARMONIC: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadKind {
    /// Keys are ranks 1..=distinct with frequency 1/(k·H_distinct).
    PowerLaw { distinct: u64 },
    /// Integers uniform over lo..=hi.
    Uniform { lo: u64, hi: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub n: u64,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("uniform range is empty: lo {lo} > hi {hi}")]
    EmptyRange { lo: u64, hi: u64 },
}

fn small_harmonic_table() -> [f64; EXACT_HARMONIC] {
    let mut small = [0.0f64; EXACT_HARMONIC];
    let mut acc = 0.0f64;
    for (k, slot) in small.iter_mut().enumerate().skip(1) {
        acc += 1.0 / k as f64;
        *slot = acc;
    }
    small
}

fn harmonic_from(small: &[f64; EXACT_HARMONIC], k: u64) -> f64 {
    if (k as usize) < EXACT_HARMONIC {
        small[k as usize]
    } else {
        let x = k as f64;
        let xx = x * x;
        x.ln() + EULER_GAMMA + 0.5 / x - 1.0 / (12.0 * xx) + 1.0 / (120.0 * xx * xx)
    }
}

/// Inverse-CDF sampler over ranks 1..=n with weight 1/k, O(1) per draw.
pub struct PowerLawSampler {
    n: u64,
    h_n: f64,
    small: [f64; EXACT_HARMONIC],
}

impl PowerLawSampler {
    pub fn new(distinct: u64) -> Self {
        assert!(distinct >= 1, "power law needs at least one rank");
        let small = small_harmonic_table();
        let h_n = harmonic_from(&small, distinct);
        PowerLawSampler { n: distinct, h_n, small }
    }

    pub fn harmonic(&self, k: u64) -> f64 {
        harmonic_from(&self.small, k)
    }

    /// Smallest rank whose cumulative weight exceeds x; clamped to n
    /// if floating rounding pushes x to the very top of the range.
    fn rank_at(&self, x: f64) -> u64 {
        // H_k ~= ln k + gamma, so exp(x - gamma) starts within a step
        // or two of the answer; the walk settles the exact bracket.
        let guess = (x - EULER_GAMMA).exp().round() as i128;
        let mut k = guess.clamp(1, self.n as i128) as u64;
        while k > 1 && self.harmonic(k - 1) > x {
            k -= 1;
        }
        while k < self.n && self.harmonic(k) <= x {
            k += 1;
        }
        k
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> u64 {
        let x = rng.gen::<f64>() * self.h_n;
        self.rank_at(x)
    }
}

/// Reference sampler: explicit cumulative table + binary search.
/// Backs the tests pinning the walk-based path; quadratic-free but
/// O(n) memory, so only sensible for modest n.
pub struct TablePowerLaw {
    cum: Vec<f64>,
}

impl TablePowerLaw {
    pub fn new(distinct: u64) -> Self {
        assert!(distinct >= 1, "power law needs at least one rank");
        let mut cum = Vec::with_capacity(distinct as usize);
        let mut acc = 0.0f64;
        for k in 1..=distinct {
            acc += 1.0 / k as f64;
            cum.push(acc);
        }
        TablePowerLaw { cum }
    }

    fn rank_at(&self, x: f64) -> u64 {
        let idx = self.cum.partition_point(|&c| c <= x);
        (idx.min(self.cum.len() - 1) + 1) as u64
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> u64 {
        let x = rng.gen::<f64>() * self.cum[self.cum.len() - 1];
        self.rank_at(x)
    }
}

/// Flat element list; deal with `deal_round_robin` for per-PE inputs.
pub fn gen_workload(w: &Workload) -> Result<Vec<u64>, WorkloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    match w.kind {
        WorkloadKind::PowerLaw { distinct } => {
            if distinct == 0 || w.n == 0 {
                return Ok(Vec::new());
            }
            let sampler = PowerLawSampler::new(distinct);
            Ok((0..w.n).map(|_| sampler.draw(&mut rng)).collect())
        }
        WorkloadKind::Uniform { lo, hi } => {
            if lo > hi {
                return Err(WorkloadError::EmptyRange { lo, hi });
            }
            if w.n == 0 {
                return Ok(Vec::new());
            }
            let dist = rand::distributions::Uniform::new_inclusive(lo, hi);
            Ok((0..w.n).map(|_| rng.sample(dist)).collect())
        }
    }
}

/// Element i goes to PE i mod pes; every PE ends with n/pes +- 1.
pub fn deal_round_robin<T: Clone>(items: &[T], pes: usize) -> Vec<Vec<T>> {
    assert!(pes >= 1, "need at least one PE");
    let mut out = vec![Vec::with_capacity(items.len() / pes + 1); pes];
    for (i, item) in items.iter().enumerate() {
        out[i % pes].push(item.clone());
    }
    out
}

pub fn gen_workload_per_pe(w: &Workload, pes: usize) -> Result<Vec<Vec<u64>>, WorkloadError> {
    Ok(deal_round_robin(&gen_workload(w)?, pes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn harmonic_matches_direct_summation() {
        let sampler = PowerLawSampler::new(1 << 21);
        let mut acc = 0.0f64;
        for k in 1..=(1u64 << 21) {
            acc += 1.0 / k as f64;
            if k < 64 || k.is_power_of_two() || k % 100_003 == 0 {
                let h = sampler.harmonic(k);
                assert!(
                    (h - acc).abs() <= 1e-11 * acc.max(1.0),
                    "H_{k}: canonical {h} vs summed {acc}"
                );
            }
        }
    }

    #[test]
    fn rank_brackets_are_exact() {
        let sampler = PowerLawSampler::new(10_000);
        for k in [1u64, 2, 3, 63, 64, 65, 100, 9_999, 10_000] {
            let below = sampler.harmonic(k - 1);
            let above = sampler.harmonic(k);
            assert_eq!(sampler.rank_at(below), k, "left edge of rank {k}");
            let inside = below + (above - below) * 0.5;
            assert_eq!(sampler.rank_at(inside), k, "interior of rank {k}");
        }
        assert_eq!(sampler.rank_at(sampler.h_n * 2.0), 10_000);
    }

    #[test]
    fn rank_one_frequency_two_keys() {
        // f(1; 2) = 1 / H_2 = 2/3.
        let w = Workload {
            kind: WorkloadKind::PowerLaw { distinct: 2 },
            n: 100_000,
            seed: 0xA11CE,
        };
        let data = gen_workload(&w).unwrap();
        let ones = data.iter().filter(|&&k| k == 1).count() as f64;
        let freq = ones / data.len() as f64;
        let sigma = (2.0 / 9.0 / data.len() as f64).sqrt();
        assert!(
            (freq - 2.0 / 3.0).abs() <= 4.0 * sigma,
            "rank-1 frequency {freq} vs 2/3 +- {}",
            4.0 * sigma
        );
    }

    #[test]
    fn rank_one_frequency_million_keys() {
        let w = Workload {
            kind: WorkloadKind::PowerLaw { distinct: 1_000_000 },
            n: 100_000,
            seed: 7,
        };
        let data = gen_workload(&w).unwrap();
        let sampler = PowerLawSampler::new(1_000_000);
        let expect = 1.0 / sampler.h_n;
        let ones = data.iter().filter(|&&k| k == 1).count() as f64;
        let freq = ones / data.len() as f64;
        let sigma = (expect * (1.0 - expect) / data.len() as f64).sqrt();
        assert!(
            (freq - expect).abs() <= 4.0 * sigma,
            "rank-1 frequency {freq} vs {expect} +- {}",
            4.0 * sigma
        );
        assert!(data.iter().all(|&k| (1..=1_000_000).contains(&k)));
    }

    #[test]
    fn uniform_allows_degenerate_range() {
        let w = Workload {
            kind: WorkloadKind::Uniform { lo: 0, hi: 0 },
            n: 3,
            seed: 1,
        };
        assert_eq!(gen_workload(&w).unwrap(), vec![0, 0, 0]);
        let bad = Workload {
            kind: WorkloadKind::Uniform { lo: 5, hi: 4 },
            n: 3,
            seed: 1,
        };
        assert_eq!(
            gen_workload(&bad).unwrap_err(),
            WorkloadError::EmptyRange { lo: 5, hi: 4 }
        );
    }

    #[test]
    fn uniform_stays_in_range() {
        let w = Workload {
            kind: WorkloadKind::Uniform { lo: 10, hi: 13 },
            n: 10_000,
            seed: 99,
        };
        let data = gen_workload(&w).unwrap();
        for side in 10..=13u64 {
            let cnt = data.iter().filter(|&&v| v == side).count();
            assert!(cnt > 2_000, "value {side} drawn {cnt} times");
        }
    }

    #[test]
    fn same_seed_same_workload() {
        let w = Workload {
            kind: WorkloadKind::PowerLaw { distinct: 1000 },
            n: 5_000,
            seed: 42,
        };
        assert_eq!(gen_workload(&w).unwrap(), gen_workload(&w).unwrap());
        let mut other = w;
        other.seed = 43;
        assert_ne!(gen_workload(&w).unwrap(), gen_workload(&other).unwrap());
    }

    #[test]
    fn empty_inputs_give_empty_workloads() {
        for w in [
            Workload { kind: WorkloadKind::PowerLaw { distinct: 0 }, n: 10, seed: 1 },
            Workload { kind: WorkloadKind::PowerLaw { distinct: 10 }, n: 0, seed: 1 },
            Workload { kind: WorkloadKind::Uniform { lo: 0, hi: 9 }, n: 0, seed: 1 },
        ] {
            assert_eq!(gen_workload(&w).unwrap(), Vec::<u64>::new());
        }
    }

    #[test]
    fn dealing_is_balanced_and_strided() {
        let items: Vec<u64> = (0..10).collect();
        let dealt = deal_round_robin(&items, 4);
        assert_eq!(dealt.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        assert_eq!(dealt[0], vec![0, 4, 8]);
        assert_eq!(dealt[3], vec![3, 7]);
        let n = 50_000u64;
        let w = Workload { kind: WorkloadKind::PowerLaw { distinct: 100 }, n, seed: 5 };
        for p in [1usize, 3, 4, 8] {
            let per_pe = gen_workload_per_pe(&w, p).unwrap();
            assert_eq!(per_pe.len(), p);
            let lo = n as usize / p;
            for slice in &per_pe {
                assert!(slice.len() == lo || slice.len() == lo + 1);
            }
            assert_eq!(per_pe.iter().map(Vec::len).sum::<usize>(), n as usize);
        }
    }

    proptest! {
        // The O(1) walk and the cumulative-table binary search agree
        // rank for rank, so the fast path is the table path.
        #[test]
        fn walk_matches_table_rank_for_rank(seed: u64, pick in 0usize..3) {
            let n = [2u64, 97, 4096][pick];
            let fast = PowerLawSampler::new(n);
            let table = TablePowerLaw::new(n);
            let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
            let mut rng_b = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1_000 {
                prop_assert_eq!(fast.draw(&mut rng_a), table.draw(&mut rng_b));
            }
        }

        #[test]
        fn draws_stay_in_support(seed: u64, n in 1u64..100_000) {
            let sampler = PowerLawSampler::new(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let k = sampler.draw(&mut rng);
                prop_assert!((1..=n).contains(&k));
            }
        }
    }

    #[test]
    fn walk_matches_table_bulk() {
        // Heavier fixed-seed sweep backing the proptest above.
        for n in [2u64, 97, 4096] {
            let fast = PowerLawSampler::new(n);
            let table = TablePowerLaw::new(n);
            let mut rng_a = ChaCha8Rng::seed_from_u64(0xFEED ^ n);
            let mut rng_b = ChaCha8Rng::seed_from_u64(0xFEED ^ n);
            for i in 0..100_000 {
                let a = fast.draw(&mut rng_a);
                let b = table.draw(&mut rng_b);
                assert_eq!(a, b, "n={n} draw {i}");
            }
        }
    }
}
