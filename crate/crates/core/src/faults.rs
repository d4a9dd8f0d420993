//! Seeded fault injectors that corrupt operation inputs or outputs so
//! the experiment harness can measure checker detection accuracy.
//!
//! Every manipulation is deterministic in (data, manipulation) and
//! guaranteed to change the data as a multiset; draws that would be
//! no-ops (switching equal values, rerolling the same key) are
//! resampled a bounded number of times and then reported as errors.

use crate::dataops::KeyValue;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

/// Upper bound on no-op resampling before giving up.
const MAX_RESAMPLES: u32 = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FaultError {
    #[error("manipulation needs nonempty data")]
    EmptyData,
    #[error("{kind} is not a {class} manipulation")]
    WrongClass {
        kind: &'static str,
        class: &'static str,
    },
    #[error("IncDec count must be at least 1")]
    ZeroIncDec,
    #[error("IncDec({n}) needs {needed} elements with distinct keys, found {available}")]
    Infeasible {
        n: u32,
        needed: usize,
        available: usize,
    },
    #[error("SetEqual needs at least 2 elements")]
    TooFewElements,
    #[error("manipulation kept resampling to a no-op after {0} attempts")]
    NoEffect(u32),
}

/// Which stream of the checked operation the corruption lands on. The
/// harness interprets this; the patch computation itself is identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamSide {
    Input,
    Output,
}

/// Fault families. The first five act on key-value data (aggregation
/// checkers), the last four on plain words (permutation checkers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    /// Flip one random bit of one element's 128-bit encoding
    /// (key = low word, value = high word, little-endian bit order).
    Bitflip,
    /// Replace one element's key with a fresh uniform 64-bit key.
    RandKey,
    /// Exchange the values of two elements with distinct keys.
    SwitchValues,
    /// Add 1 to one element's key (wrapping).
    IncKey,
    /// Pick 2n elements with pairwise-distinct keys; add 1 to the
    /// values of n of them and subtract 1 from the values of the
    /// other n (wrapping).
    IncDec(u32),
    /// Add 1 to one word (wrapping).
    Increment,
    /// Replace one word with a fresh uniform 64-bit word.
    Randomize,
    /// Set one nonzero word to 0.
    Reset,
    /// Overwrite one word with another, different word.
    SetEqual,
}

impl FaultKind {
    pub fn is_sum_kind(self) -> bool {
        matches!(
            self,
            FaultKind::Bitflip
                | FaultKind::RandKey
                | FaultKind::SwitchValues
                | FaultKind::IncKey
                | FaultKind::IncDec(_)
        )
    }

    pub fn is_perm_kind(self) -> bool {
        matches!(
            self,
            FaultKind::Increment | FaultKind::Randomize | FaultKind::Reset | FaultKind::SetEqual
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Bitflip => "bitflip",
            FaultKind::RandKey => "randkey",
            FaultKind::SwitchValues => "switchvalues",
            FaultKind::IncKey => "inckey",
            FaultKind::IncDec(_) => "incdec",
            FaultKind::Increment => "increment",
            FaultKind::Randomize => "randomize",
            FaultKind::Reset => "reset",
            FaultKind::SetEqual => "setequal",
        }
    }

    /// CLI spelling: `incdec1`, `incdec2`, ... carry the count inline.
    pub fn cli_name(self) -> String {
        match self {
            FaultKind::IncDec(n) => format!("incdec{n}"),
            other => other.name().to_string(),
        }
    }

    pub fn parse_cli_name(name: &str) -> Option<FaultKind> {
        match name {
            "bitflip" => return Some(FaultKind::Bitflip),
            "randkey" => return Some(FaultKind::RandKey),
            "switchvalues" => return Some(FaultKind::SwitchValues),
            "inckey" => return Some(FaultKind::IncKey),
            "increment" => return Some(FaultKind::Increment),
            "randomize" => return Some(FaultKind::Randomize),
            "reset" => return Some(FaultKind::Reset),
            "setequal" => return Some(FaultKind::SetEqual),
            _ => {}
        }
        let n = name.strip_prefix("incdec")?.parse().ok()?;
        (n >= 1).then_some(FaultKind::IncDec(n))
    }
}

/// One fully-specified corruption: what, where, and with which seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Manipulation {
    pub kind: FaultKind,
    pub seed: u64,
    pub target: StreamSide,
}

impl Manipulation {
    pub fn new(kind: FaultKind, seed: u64) -> Self {
        Manipulation {
            kind,
            seed,
            target: StreamSide::Input,
        }
    }

    pub fn on_output(kind: FaultKind, seed: u64) -> Self {
        Manipulation {
            kind,
            seed,
            target: StreamSide::Output,
        }
    }
}

/// Sparse edit produced by a key-value manipulation: `(index, new
/// element)` pairs, indices strictly increasing. Applying the patch to
/// the original data always changes its multiset.
pub fn sum_manipulation_patch(
    data: &[KeyValue],
    m: &Manipulation,
) -> Result<Vec<(usize, KeyValue)>, FaultError> {
    if !m.kind.is_sum_kind() {
        return Err(FaultError::WrongClass {
            kind: m.kind.name(),
            class: "key-value",
        });
    }
    if data.is_empty() {
        return Err(FaultError::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    match m.kind {
        FaultKind::Bitflip => {
            let idx = rng.gen_range(0..data.len());
            let bit = rng.gen_range(0..128u32);
            let mut e = data[idx];
            if bit < 64 {
                e.key ^= 1 << bit;
            } else {
                e.value ^= (1u64 << (bit - 64)) as i64;
            }
            Ok(vec![(idx, e)])
        }
        FaultKind::RandKey => {
            let idx = rng.gen_range(0..data.len());
            let mut e = data[idx];
            for attempt in 0.. {
                if attempt == MAX_RESAMPLES {
                    return Err(FaultError::NoEffect(MAX_RESAMPLES));
                }
                let key = rng.gen::<u64>();
                if key != e.key {
                    e.key = key;
                    break;
                }
            }
            Ok(vec![(idx, e)])
        }
        FaultKind::SwitchValues => {
            // Equal values or equal keys leave the multiset unchanged.
            for attempt in 0.. {
                if attempt == MAX_RESAMPLES {
                    return Err(FaultError::NoEffect(MAX_RESAMPLES));
                }
                let i = rng.gen_range(0..data.len());
                let j = rng.gen_range(0..data.len());
                if i == j || data[i].key == data[j].key || data[i].value == data[j].value {
                    continue;
                }
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                return Ok(vec![
                    (lo, KeyValue::new(data[lo].key, data[hi].value)),
                    (hi, KeyValue::new(data[hi].key, data[lo].value)),
                ]);
            }
            unreachable!()
        }
        FaultKind::IncKey => {
            let idx = rng.gen_range(0..data.len());
            let mut e = data[idx];
            e.key = e.key.wrapping_add(1);
            Ok(vec![(idx, e)])
        }
        FaultKind::IncDec(n) => {
            if n == 0 {
                return Err(FaultError::ZeroIncDec);
            }
            let needed = 2 * n as usize;
            // One candidate element per distinct key (first occurrence).
            let mut seen = HashSet::new();
            let mut firsts: Vec<usize> = Vec::new();
            for (i, e) in data.iter().enumerate() {
                if seen.insert(e.key) {
                    firsts.push(i);
                }
            }
            if firsts.len() < needed {
                return Err(FaultError::Infeasible {
                    n,
                    needed,
                    available: firsts.len(),
                });
            }
            // Partial Fisher-Yates: uniform sample without replacement.
            for i in 0..needed {
                let j = rng.gen_range(i..firsts.len());
                firsts.swap(i, j);
            }
            let mut patch: Vec<(usize, KeyValue)> = firsts[..needed]
                .iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let mut e = data[idx];
                    e.value = if pos < n as usize {
                        e.value.wrapping_add(1)
                    } else {
                        e.value.wrapping_sub(1)
                    };
                    (idx, e)
                })
                .collect();
            patch.sort_unstable_by_key(|&(idx, _)| idx);
            Ok(patch)
        }
        _ => unreachable!("sum kinds exhausted"),
    }
}

/// Applies [`sum_manipulation_patch`] to a copy of the data.
pub fn apply_sum_manipulation(
    data: &[KeyValue],
    m: &Manipulation,
) -> Result<Vec<KeyValue>, FaultError> {
    let patch = sum_manipulation_patch(data, m)?;
    let mut out = data.to_vec();
    for (idx, e) in patch {
        out[idx] = e;
    }
    Ok(out)
}

/// Sparse edit produced by a plain-word manipulation.
pub fn perm_manipulation_patch(
    data: &[u64],
    m: &Manipulation,
) -> Result<Vec<(usize, u64)>, FaultError> {
    if !m.kind.is_perm_kind() {
        return Err(FaultError::WrongClass {
            kind: m.kind.name(),
            class: "plain-word",
        });
    }
    if data.is_empty() {
        return Err(FaultError::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    match m.kind {
        FaultKind::Increment => {
            let idx = rng.gen_range(0..data.len());
            Ok(vec![(idx, data[idx].wrapping_add(1))])
        }
        FaultKind::Randomize => {
            let idx = rng.gen_range(0..data.len());
            for attempt in 0.. {
                if attempt == MAX_RESAMPLES {
                    return Err(FaultError::NoEffect(MAX_RESAMPLES));
                }
                let w = rng.gen::<u64>();
                if w != data[idx] {
                    return Ok(vec![(idx, w)]);
                }
            }
            unreachable!()
        }
        FaultKind::Reset => {
            for attempt in 0.. {
                if attempt == MAX_RESAMPLES {
                    return Err(FaultError::NoEffect(MAX_RESAMPLES));
                }
                let idx = rng.gen_range(0..data.len());
                if data[idx] != 0 {
                    return Ok(vec![(idx, 0)]);
                }
            }
            unreachable!()
        }
        FaultKind::SetEqual => {
            if data.len() < 2 {
                return Err(FaultError::TooFewElements);
            }
            for attempt in 0.. {
                if attempt == MAX_RESAMPLES {
                    return Err(FaultError::NoEffect(MAX_RESAMPLES));
                }
                let i = rng.gen_range(0..data.len());
                let j = rng.gen_range(0..data.len());
                if i != j && data[i] != data[j] {
                    return Ok(vec![(i, data[j])]);
                }
            }
            unreachable!()
        }
        _ => unreachable!("perm kinds exhausted"),
    }
}

/// Applies [`perm_manipulation_patch`] to a copy of the data.
pub fn apply_perm_manipulation(data: &[u64], m: &Manipulation) -> Result<Vec<u64>, FaultError> {
    let patch = perm_manipulation_patch(data, m)?;
    let mut out = data.to_vec();
    for (idx, w) in patch {
        out[idx] = w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kv(key: u64, value: i64) -> KeyValue {
        KeyValue::new(key, value)
    }

    fn sorted(mut v: Vec<KeyValue>) -> Vec<KeyValue> {
        v.sort_unstable_by_key(|e| (e.key, e.value));
        v
    }

    #[test]
    fn cli_names_round_trip() {
        let kinds = [
            FaultKind::Bitflip,
            FaultKind::RandKey,
            FaultKind::SwitchValues,
            FaultKind::IncKey,
            FaultKind::IncDec(1),
            FaultKind::IncDec(2),
            FaultKind::Increment,
            FaultKind::Randomize,
            FaultKind::Reset,
            FaultKind::SetEqual,
        ];
        for k in kinds {
            assert_eq!(FaultKind::parse_cli_name(&k.cli_name()), Some(k));
        }
        assert_eq!(FaultKind::parse_cli_name("incdec0"), None);
        assert_eq!(FaultKind::parse_cli_name("nonsense"), None);
    }

    #[test]
    fn bitflip_changes_exactly_one_bit() {
        let data = vec![kv(0x1234, 0x5678)];
        for seed in 0..50 {
            let out =
                apply_sum_manipulation(&data, &Manipulation::new(FaultKind::Bitflip, seed)).unwrap();
            let key_diff = (out[0].key ^ data[0].key).count_ones();
            let val_diff = (out[0].value ^ data[0].value).count_ones();
            assert_eq!(key_diff + val_diff, 1, "seed {seed}");
        }
    }

    #[test]
    fn bitflip_reaches_both_words() {
        let data = vec![kv(0, 0)];
        let mut touched_key = false;
        let mut touched_value = false;
        for seed in 0..200 {
            let out =
                apply_sum_manipulation(&data, &Manipulation::new(FaultKind::Bitflip, seed)).unwrap();
            touched_key |= out[0].key != 0;
            touched_value |= out[0].value != 0;
        }
        assert!(touched_key && touched_value);
    }

    #[test]
    fn randkey_keeps_value_and_changes_key() {
        let data = vec![kv(7, 99), kv(8, 100)];
        let out = apply_sum_manipulation(&data, &Manipulation::new(FaultKind::RandKey, 3)).unwrap();
        let changed: Vec<usize> = (0..2).filter(|&i| out[i] != data[i]).collect();
        assert_eq!(changed.len(), 1);
        let i = changed[0];
        assert_ne!(out[i].key, data[i].key);
        assert_eq!(out[i].value, data[i].value);
    }

    #[test]
    fn switchvalues_spec_example() {
        let data = vec![kv(1, 5), kv(2, 7)];
        let out =
            apply_sum_manipulation(&data, &Manipulation::new(FaultKind::SwitchValues, 11)).unwrap();
        assert_eq!(out, vec![kv(1, 7), kv(2, 5)]);
    }

    #[test]
    fn switchvalues_skips_noop_pairs() {
        // Only the (key 1, key 2) pair with distinct values can be hit.
        let data = vec![kv(1, 5), kv(2, 7), kv(1, 9)];
        for seed in 0..30 {
            let m = Manipulation::new(FaultKind::SwitchValues, seed);
            let out = apply_sum_manipulation(&data, &m).unwrap();
            assert_ne!(sorted(out.clone()), sorted(data.clone()), "seed {seed}");
        }
        // All values equal: every swap is a no-op.
        let stuck = vec![kv(1, 5), kv(2, 5)];
        assert_eq!(
            apply_sum_manipulation(&stuck, &Manipulation::new(FaultKind::SwitchValues, 0)),
            Err(FaultError::NoEffect(MAX_RESAMPLES))
        );
    }

    #[test]
    fn inckey_increments_one_key() {
        let data = vec![kv(41, 5)];
        let out = apply_sum_manipulation(&data, &Manipulation::new(FaultKind::IncKey, 0)).unwrap();
        assert_eq!(out, vec![kv(42, 5)]);
        let data = vec![kv(u64::MAX, 5)];
        let out = apply_sum_manipulation(&data, &Manipulation::new(FaultKind::IncKey, 0)).unwrap();
        assert_eq!(out, vec![kv(0, 5)]);
    }

    #[test]
    fn incdec_moves_one_unit_between_two_values() {
        let data = vec![kv(1, 5), kv(2, 7)];
        for seed in 0..20 {
            let m = Manipulation::new(FaultKind::IncDec(1), seed);
            let out = apply_sum_manipulation(&data, &m).unwrap();
            // Keys untouched, one value +1 and the other -1.
            assert!(
                out == vec![kv(1, 6), kv(2, 6)] || out == vec![kv(1, 4), kv(2, 8)],
                "seed {seed}: {out:?}"
            );
        }
    }

    #[test]
    fn incdec_targets_have_distinct_keys() {
        // Key 1 appears three times; only its first occurrence may be
        // edited, and never together with another key-1 element.
        let data = vec![kv(1, 10), kv(1, 20), kv(2, 30), kv(1, 40), kv(3, 50)];
        for seed in 0..40 {
            let m = Manipulation::new(FaultKind::IncDec(1), seed);
            let out = apply_sum_manipulation(&data, &m).unwrap();
            let edited: Vec<usize> = (0..data.len()).filter(|&i| out[i] != data[i]).collect();
            assert_eq!(edited.len(), 2, "seed {seed}");
            let keys: HashSet<u64> = edited.iter().map(|&i| data[i].key).collect();
            assert_eq!(keys.len(), 2, "seed {seed}");
            let mut deltas: Vec<i64> = edited
                .iter()
                .map(|&i| out[i].value - data[i].value)
                .collect();
            deltas.sort_unstable();
            assert_eq!(deltas, vec![-1, 1], "seed {seed}");
        }
    }

    #[test]
    fn incdec_reports_infeasible_instances() {
        let data = vec![kv(1, 5), kv(1, 7)];
        assert_eq!(
            apply_sum_manipulation(&data, &Manipulation::new(FaultKind::IncDec(1), 0)),
            Err(FaultError::Infeasible {
                n: 1,
                needed: 2,
                available: 1
            })
        );
        let data = vec![kv(1, 5), kv(2, 7), kv(3, 9)];
        assert_eq!(
            apply_sum_manipulation(&data, &Manipulation::new(FaultKind::IncDec(2), 0)),
            Err(FaultError::Infeasible {
                n: 2,
                needed: 4,
                available: 3
            })
        );
        assert_eq!(
            apply_sum_manipulation(&data, &Manipulation::new(FaultKind::IncDec(0), 0)),
            Err(FaultError::ZeroIncDec)
        );
    }

    #[test]
    fn incdec2_edits_four_elements() {
        let data: Vec<KeyValue> = (0..6).map(|i| kv(i, 100 + i as i64)).collect();
        let m = Manipulation::new(FaultKind::IncDec(2), 9);
        let out = apply_sum_manipulation(&data, &m).unwrap();
        let mut deltas: Vec<i64> = (0..6)
            .map(|i| out[i].value - data[i].value)
            .filter(|&d| d != 0)
            .collect();
        deltas.sort_unstable();
        assert_eq!(deltas, vec![-1, -1, 1, 1]);
    }

    #[test]
    fn perm_spec_examples() {
        assert_eq!(
            apply_perm_manipulation(&[5], &Manipulation::new(FaultKind::Reset, 0)).unwrap(),
            vec![0]
        );
        assert_eq!(
            apply_perm_manipulation(&[5], &Manipulation::new(FaultKind::Increment, 0)).unwrap(),
            vec![6]
        );
        let out = apply_perm_manipulation(&[5, 9], &Manipulation::new(FaultKind::SetEqual, 1)).unwrap();
        assert!(out == vec![9, 9] || out == vec![5, 5], "{out:?}");
    }

    #[test]
    fn perm_error_cases() {
        assert_eq!(
            apply_perm_manipulation(&[5], &Manipulation::new(FaultKind::SetEqual, 0)),
            Err(FaultError::TooFewElements)
        );
        assert_eq!(
            apply_perm_manipulation(&[0, 0], &Manipulation::new(FaultKind::Reset, 0)),
            Err(FaultError::NoEffect(MAX_RESAMPLES))
        );
        assert_eq!(
            apply_perm_manipulation(&[4, 4], &Manipulation::new(FaultKind::SetEqual, 0)),
            Err(FaultError::NoEffect(MAX_RESAMPLES))
        );
        assert_eq!(
            apply_perm_manipulation(&[], &Manipulation::new(FaultKind::Reset, 0)),
            Err(FaultError::EmptyData)
        );
    }

    #[test]
    fn class_mismatch_is_rejected() {
        assert_eq!(
            apply_perm_manipulation(&[1], &Manipulation::new(FaultKind::Bitflip, 0)),
            Err(FaultError::WrongClass {
                kind: "bitflip",
                class: "plain-word"
            })
        );
        assert_eq!(
            apply_sum_manipulation(&[kv(1, 2)], &Manipulation::new(FaultKind::Reset, 0)),
            Err(FaultError::WrongClass {
                kind: "reset",
                class: "key-value"
            })
        );
    }

    proptest! {
        #[test]
        fn sum_manipulations_are_deterministic_and_change_the_multiset(
            keys in proptest::collection::vec(0u64..50, 2..40),
            seed in 0u64..1000,
            kind_pick in 0usize..5,
        ) {
            let data: Vec<KeyValue> = keys
                .iter()
                .enumerate()
                .map(|(i, &k)| kv(k, 1000 + i as i64))
                .collect();
            let kind = [
                FaultKind::Bitflip,
                FaultKind::RandKey,
                FaultKind::SwitchValues,
                FaultKind::IncKey,
                FaultKind::IncDec(1),
            ][kind_pick];
            let m = Manipulation::new(kind, seed);
            match apply_sum_manipulation(&data, &m) {
                Ok(out) => {
                    prop_assert_eq!(&out, &apply_sum_manipulation(&data, &m).unwrap());
                    prop_assert_ne!(sorted(out), sorted(data));
                }
                Err(e) => {
                    let expected =
                        matches!(e, FaultError::Infeasible { .. } | FaultError::NoEffect(_));
                    prop_assert!(expected, "unexpected error {e:?}");
                }
            }
        }

        #[test]
        fn perm_manipulations_are_deterministic_and_change_the_multiset(
            data in proptest::collection::vec(0u64..100, 1..40),
            seed in 0u64..1000,
            kind_pick in 0usize..4,
        ) {
            let kind = [
                FaultKind::Increment,
                FaultKind::Randomize,
                FaultKind::Reset,
                FaultKind::SetEqual,
            ][kind_pick];
            let m = Manipulation::new(kind, seed);
            match apply_perm_manipulation(&data, &m) {
                Ok(out) => {
                    prop_assert_eq!(&out, &apply_perm_manipulation(&data, &m).unwrap());
                    let mut a = out.clone();
                    let mut b = data.clone();
                    a.sort_unstable();
                    b.sort_unstable();
                    prop_assert_ne!(a, b);
                }
                Err(e) => prop_assert!(
                    matches!(e, FaultError::NoEffect(_) | FaultError::TooFewElements)
                ),
            }
        }
    }
}
