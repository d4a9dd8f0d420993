//! Hash families used by the checkers: CRC-32C, tabulation hashing in
//! 32- and 64-bit variants, slicing of one hash value into several
//! small bucket indices, and an index hash for position-dependent
//! fingerprints.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Generator used to fill tabulation tables; recorded in experiment
/// metadata so runs can be reproduced.
pub const TABLE_GENERATOR: &str = "chacha8";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HashError {
    #[error("bits_per_slice must be at least 1")]
    EmptySlice,
    #[error("slice plan needs {needed} bits but the source hash has {width}")]
    PlanTooWide { needed: u32, width: u32 },
    #[error("source width {0} is not 32 or 64")]
    BadSourceWidth(u32),
}

/// Hash function family. CLI names: `crc`, `tab`, `tab64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HashFamily {
    /// Standard CRC-32C (Castagnoli polynomial) of the key's 8-byte
    /// little-endian encoding. The seed is ignored.
    Crc32c,
    /// XOR of 8 lookup tables of 256 32-bit entries, one per key
    /// byte; a change in any byte rerandomizes the output.
    Tab32,
    /// XOR of 8 lookup tables of 256 64-bit entries, indexed by all
    /// eight key bytes.
    Tab64,
}

impl HashFamily {
    pub fn output_bits(self) -> u32 {
        match self {
            HashFamily::Crc32c | HashFamily::Tab32 => 32,
            HashFamily::Tab64 => 64,
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            HashFamily::Crc32c => "crc",
            HashFamily::Tab32 => "tab",
            HashFamily::Tab64 => "tab64",
        }
    }

    pub fn parse_cli_name(name: &str) -> Option<HashFamily> {
        match name {
            "crc" => Some(HashFamily::Crc32c),
            "tab" => Some(HashFamily::Tab32),
            "tab64" => Some(HashFamily::Tab64),
            _ => None,
        }
    }
}

/// A concrete hash function: family plus table seed. The same
/// (family, seed) yields the identical function everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HashSpec {
    pub family: HashFamily,
    pub seed: u64,
}

impl HashSpec {
    pub fn new(family: HashFamily, seed: u64) -> Self {
        HashSpec { family, seed }
    }

    pub fn output_bits(self) -> u32 {
        self.family.output_bits()
    }
}

enum Tables {
    None,
    T32(Box<[[u32; 256]; 8]>),
    T64(Box<[[u64; 256]; 8]>),
}

/// An evaluable hash function with its tables materialized. Immutable
/// after construction and safe to share across threads.
pub struct Hasher {
    spec: HashSpec,
    tables: Tables,
}

impl Hasher {
    pub fn new(spec: HashSpec) -> Self {
        let tables = match spec.family {
            HashFamily::Crc32c => Tables::None,
            HashFamily::Tab32 => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let mut t = Box::new([[0u32; 256]; 8]);
                for table in t.iter_mut() {
                    for entry in table.iter_mut() {
                        *entry = rng.next_u32();
                    }
                }
                Tables::T32(t)
            }
            HashFamily::Tab64 => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let mut t = Box::new([[0u64; 256]; 8]);
                for table in t.iter_mut() {
                    for entry in table.iter_mut() {
                        *entry = rng.next_u64();
                    }
                }
                Tables::T64(t)
            }
        };
        Hasher { spec, tables }
    }

    /// Test hook: a tabulation hasher with all tables zeroed, so every
    /// key hashes to 0.
    pub fn zeroed(family: HashFamily) -> Self {
        let tables = match family {
            HashFamily::Tab32 => Tables::T32(Box::new([[0u32; 256]; 8])),
            HashFamily::Tab64 => Tables::T64(Box::new([[0u64; 256]; 8])),
            HashFamily::Crc32c => panic!("Crc32c has no tables to zero"),
        };
        Hasher {
            spec: HashSpec::new(family, 0),
            tables,
        }
    }

    pub fn spec(&self) -> HashSpec {
        self.spec
    }

    pub fn output_bits(&self) -> u32 {
        self.spec.family.output_bits()
    }

    #[inline]
    pub fn eval(&self, key: u64) -> u64 {
        match &self.tables {
            Tables::None => crc32c(&key.to_le_bytes()) as u64,
            Tables::T32(t) => {
                let b = key.to_le_bytes();
                let mut h = 0u32;
                for (table, &byte) in t.iter().zip(b.iter()) {
                    h ^= table[byte as usize];
                }
                h as u64
            }
            Tables::T64(t) => {
                let b = key.to_le_bytes();
                let mut h = 0u64;
                for (table, &byte) in t.iter().zip(b.iter()) {
                    h ^= table[byte as usize];
                }
                h
            }
        }
    }
}

/// Evaluates `spec` on `key`. Builds the tables on every call; for
/// bulk evaluation construct a [`Hasher`] once instead.
pub fn eval_hash(spec: HashSpec, key: u64) -> u64 {
    Hasher::new(spec).eval(key)
}

/// Position hash for fingerprints: the multiplier for global index `i`
/// is just the hash of `i`, so it is computable on the fly anywhere.
#[inline]
pub fn index_hash(hasher: &Hasher, global_index: u64) -> u64 {
    hasher.eval(global_index)
}

/// Interprets one hash value as `num_slices` concatenated smaller hash
/// values of `bits_per_slice` bits each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlicePlan {
    num_slices: u32,
    bits_per_slice: u32,
    source_width: u32,
}

impl SlicePlan {
    pub fn new(num_slices: u32, bits_per_slice: u32, source_width: u32) -> Result<Self, HashError> {
        if bits_per_slice == 0 {
            return Err(HashError::EmptySlice);
        }
        if source_width != 32 && source_width != 64 {
            return Err(HashError::BadSourceWidth(source_width));
        }
        let needed = num_slices
            .checked_mul(bits_per_slice)
            .ok_or(HashError::PlanTooWide {
                needed: u32::MAX,
                width: source_width,
            })?;
        if needed > source_width {
            return Err(HashError::PlanTooWide {
                needed,
                width: source_width,
            });
        }
        Ok(SlicePlan {
            num_slices,
            bits_per_slice,
            source_width,
        })
    }

    pub fn num_slices(&self) -> u32 {
        self.num_slices
    }

    pub fn bits_per_slice(&self) -> u32 {
        self.bits_per_slice
    }

    pub fn source_width(&self) -> u32 {
        self.source_width
    }

    /// Raw value of slice `i`: bits `[i*bits_per_slice, (i+1)*bits_per_slice)`.
    #[inline]
    pub fn slice(&self, hash: u64, i: u32) -> u64 {
        debug_assert!(i < self.num_slices);
        let mask = mask_for(self.bits_per_slice);
        (hash >> (i * self.bits_per_slice)) & mask
    }
}

#[inline]
pub(crate) fn mask_for(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Splits `hash` into buckets in `1..=d`, one per slice. Requires
/// `2^bits_per_slice >= d` so every bucket is reachable.
pub fn slice_buckets(hash: u64, plan: &SlicePlan, d: u64) -> Vec<u64> {
    assert!(d >= 1, "bucket count must be positive");
    assert!(
        plan.bits_per_slice >= 64 || d <= 1u64 << plan.bits_per_slice,
        "bucket count {d} not reachable with {} bit slices",
        plan.bits_per_slice
    );
    (0..plan.num_slices)
        .map(|i| plan.slice(hash, i) % d + 1)
        .collect()
}

/// SplitMix64 finalizer; used to derive independent seeds from one
/// master seed.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CRC32C_POLY: u32 = 0x82F6_3B78; // Castagnoli, reflected

const fn crc32c_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0usize;
    while i < 256 {
        let mut crc = i as u32;
        let mut b = 0;
        while b < 8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ CRC32C_POLY
            } else {
                crc >> 1
            };
            b += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC32C_TABLE: [u32; 256] = crc32c_table();

pub(crate) fn crc32c(bytes: &[u8]) -> u32 {
    let mut crc = u32::MAX;
    for &b in bytes {
        crc = (crc >> 8) ^ CRC32C_TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}
