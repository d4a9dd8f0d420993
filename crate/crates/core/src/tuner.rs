//! Parameter tuning for the condensed sum check: given a payload budget
//! in bits and a target false-accept probability, finds the bucket
//! count, modulus bound, and iteration count that minimize iterations.
//!
//! All threshold decisions use exact integer arithmetic on the binary
//! expansion of the target, never floating logarithms, so boundary
//! cases round the same way on every platform.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest log2(r̂) considered by [`optimize`]. Every practically
/// useful configuration fits well below this.
pub const MAX_RHAT_LOG2: u32 = 30;

#[derive(Debug, Error, PartialEq)]
pub enum TuneError {
    #[error("bucket count d={d} and modulus bound rhat={rhat} must satisfy 2 <= d <= rhat")]
    InvalidBuckets { d: u64, rhat: u64 },
    #[error("iteration count must be at least 1")]
    InvalidIterations,
    #[error("target probability {0} must lie in (0, 1]")]
    InvalidDelta(f64),
    #[error("per-iteration accept bound 1/{rhat} + 1/{d} is not below 1")]
    DivergentBase { d: u64, rhat: u64 },
    #[error("budget of {0} bits is below the 8-bit minimum")]
    BudgetTooSmall(u64),
    #[error("no configuration reaches delta={delta} within {budget_bits} bits")]
    Infeasible { budget_bits: u64, delta: f64 },
}

/// A tuned sum-check configuration. `payload_bits` is the exact wire
/// size of one condensed table: d buckets of ceil(log2(2*rhat)) bits
/// per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub d: u64,
    pub rhat: u64,
    pub iterations: u32,
    pub achieved_delta: f64,
    pub payload_bits: u64,
}

/// Budget/target pairs of the bundled tuning sweep (the CLI's
/// `tune --table2` mode prints one tuned row per pair).
pub const BUDGET_SWEEP: [(u64, f64); 16] = [
    (1024, 1e-4),
    (1024, 1e-6),
    (1024, 1e-8),
    (1024, 1e-10),
    (1024, 1e-20),
    (4096, 1e-6),
    (4096, 1e-10),
    (4096, 1e-20),
    (16384, 1e-7),
    (16384, 1e-10),
    (16384, 1e-20),
    (16384, 1e-30),
    (65536, 1e-10),
    (65536, 1e-20),
    (65536, 1e-30),
    (65536, 1e-40),
];

/// Exact rational value of a finite positive f64 as (numerator,
/// denominator). Every f64 is m * 2^e, so the pair is exact.
fn rational_of(x: f64) -> (BigUint, BigUint) {
    debug_assert!(x.is_finite() && x > 0.0);
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7FF) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, exp) = if exp_field == 0 {
        (frac, -1074i64) // subnormal: no implicit bit
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    let m = BigUint::from(mantissa);
    if exp >= 0 {
        (m << exp as u64, BigUint::from(1u32))
    } else {
        (m, BigUint::from(1u32) << (-exp) as u64)
    }
}

/// Exact test of (1/rhat + 1/d)^t <= num/den, i.e.
/// (d+rhat)^t * den <= num * (rhat*d)^t.
fn meets_target(d: u64, rhat: u64, t: u32, num: &BigUint, den: &BigUint) -> bool {
    let base_l = BigUint::from(d) + BigUint::from(rhat);
    let base_r = BigUint::from(d) * BigUint::from(rhat);
    base_l.pow(t) * den <= num * base_r.pow(t)
}

/// Per-configuration false-accept bound (1/rhat + 1/d)^iterations.
pub fn achieved_delta(d: u64, rhat: u64, iterations: u32) -> Result<f64, TuneError> {
    if d < 2 || rhat < d {
        return Err(TuneError::InvalidBuckets { d, rhat });
    }
    if iterations == 0 {
        return Err(TuneError::InvalidIterations);
    }
    Ok((1.0 / rhat as f64 + 1.0 / d as f64).powi(iterations as i32))
}

/// Smallest iteration count t with (1/rhat + 1/d)^t <= delta, found by
/// exact integer search. Requires the per-iteration bound below 1, so
/// the search terminates.
pub fn iterations_needed(d: u64, rhat: u64, delta: f64) -> Result<u32, TuneError> {
    if !(delta > 0.0) || delta > 1.0 {
        return Err(TuneError::InvalidDelta(delta));
    }
    let sum = BigUint::from(d) + BigUint::from(rhat);
    let prod = BigUint::from(d) * BigUint::from(rhat);
    if prod <= sum {
        return Err(TuneError::DivergentBase { d, rhat });
    }
    let (num, den) = rational_of(delta);
    // lhs/rhs track den*(d+rhat)^t and num*(d*rhat)^t incrementally.
    let mut t = 1u32;
    let mut lhs = den * &sum;
    let mut rhs = num * &prod;
    while lhs > rhs {
        t += 1;
        lhs *= &sum;
        rhs *= &prod;
    }
    Ok(t)
}

/// Finds the configuration meeting `delta` within `budget_bits`,
/// minimizing lexicographically (iterations, achieved bound, payload
/// bits). r̂ ranges over powers of two, d over 2..=r̂ within budget.
pub fn optimize(budget_bits: u64, delta: f64) -> Result<TuneResult, TuneError> {
    if budget_bits < 8 {
        return Err(TuneError::BudgetTooSmall(budget_bits));
    }
    if !(delta > 0.0) || delta >= 1.0 {
        return Err(TuneError::InvalidDelta(delta));
    }
    let (num, den) = rational_of(delta);
    for t in 1u32.. {
        // Cheapest possible iteration is 2 buckets of 2 bits.
        if u64::from(t) * 4 > budget_bits {
            return Err(TuneError::Infeasible { budget_bits, delta });
        }
        // (d, rhat, entry_bits); at fixed (t, rhat) the largest d that
        // fits the budget dominates: the bound strictly improves in d
        // and iterations/bound outrank payload in the objective.
        let mut best: Option<(u64, u64, u32)> = None;
        for log2_rhat in 1..=MAX_RHAT_LOG2 {
            let rhat = 1u64 << log2_rhat;
            let entry_bits = log2_rhat + 1; // ceil(log2(2*rhat))
            let cap = budget_bits / (u64::from(t) * u64::from(entry_bits));
            let d = cap.min(rhat);
            if d < 2 || !meets_target(d, rhat, t, &num, &den) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, brhat, bentry)) => {
                    // Compare (d+r)/(d*r) cross-multiplied in u128.
                    let lhs = u128::from(d + rhat) * u128::from(bd) * u128::from(brhat);
                    let rhs = u128::from(bd + brhat) * u128::from(d) * u128::from(rhat);
                    let payload = u64::from(entry_bits) * d;
                    let best_payload = u64::from(bentry) * bd;
                    lhs < rhs || (lhs == rhs && payload < best_payload)
                }
            };
            if better {
                best = Some((d, rhat, entry_bits));
            }
        }
        if let Some((d, rhat, entry_bits)) = best {
            return Ok(TuneResult {
                d,
                rhat,
                iterations: t,
                achieved_delta: achieved_delta(d, rhat, t).expect("validated candidate"),
                payload_bits: d * u64::from(entry_bits) * u64::from(t),
            });
        }
    }
    unreachable!("loop exits via return");
}

/// Runs [`optimize`] over the bundled [`BUDGET_SWEEP`].
pub fn budget_sweep_results() -> Vec<((u64, f64), TuneResult)> {
    BUDGET_SWEEP
        .iter()
        .map(|&(b, delta)| ((b, delta), optimize(b, delta).expect("sweep entries are feasible")))
        .collect()
}
