//! Seed-derived per-row randomness.
//!
//! Every random quantity the sketches need (bucket `h(i, j)`, sign `σ(i, j)`,
//! scaling factor `t_i`, embedding entries) is a pure function of
//! `(master_seed, instance_tag, i, j)`. Nothing is stored, so an update for
//! row `i` sees the same randomness no matter when or on which shard it
//! arrives.
//!
//! Instance tags used by the crate:
//!
//! | tag    | consumer                                   |
//! |--------|--------------------------------------------|
//! | `0x01` | standalone heavy-hitter sketch             |
//! | `0x10` | p-norm sampler, threshold copy             |
//! | `0x11` | p-norm sampler, sample copy                |
//! | `0x20` | 1-norm sampler, threshold copy (probit)    |
//! | `0x21` | 1-norm sampler, sample copy (probit)       |
//! | `0x30` | uniform component                          |
//! | `0x40` | embedding sketch for the p conditioner     |
//! | `0x41` | embedding sketch for the 1 conditioner     |

use serde::{Deserialize, Serialize};

pub const TAG_HEAVY_HITTERS: u32 = 0x01;
pub const TAG_P_SAMPLER: u32 = 0x10;
pub const TAG_ONE_SAMPLER: u32 = 0x20;
pub const TAG_UNIFORM: u32 = 0x30;
pub const TAG_EMBED_P: u32 = 0x40;
pub const TAG_EMBED_ONE: u32 = 0x41;

const DOMAIN_BUCKET: u64 = 0x6a09_e667_f3bc_c908;
const DOMAIN_SIGN: u64 = 0xbb67_ae85_84ca_a73b;
const DOMAIN_SCALE: u64 = 0x3c6e_f372_fe94_f82b;
const DOMAIN_AUX: u64 = 0xa54f_f53a_5f1d_36f1;

/// `(master_seed, instance_tag)` pair that names one independent stream of
/// randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSet {
    pub master_seed: u64,
    pub instance_tag: u32,
}

impl SeedSet {
    pub fn new(master_seed: u64, instance_tag: u32) -> Self {
        Self {
            master_seed,
            instance_tag,
        }
    }

    pub fn with_tag(self, instance_tag: u32) -> Self {
        Self {
            instance_tag,
            ..self
        }
    }

    /// Precomputes the per-domain keys; use this in hot loops.
    pub fn keys(&self) -> SeedKeys {
        let base = mix64(self.master_seed ^ 0x9e37_79b9_7f4a_7c15);
        let base = mix64(base ^ u64::from(self.instance_tag).wrapping_mul(0xff51_afd7_ed55_8ccd));
        SeedKeys {
            bucket: mix64(base ^ DOMAIN_BUCKET),
            sign: mix64(base ^ DOMAIN_SIGN),
            scale: mix64(base ^ DOMAIN_SCALE),
            aux: mix64(base ^ DOMAIN_AUX),
        }
    }

    /// Bucket `h(i, j)` in `[0, r)` of row `i` in repetition `j`.
    pub fn bucket_of(&self, i: u64, j: usize, r: usize) -> usize {
        self.keys().bucket_of(i, j, r)
    }

    /// Sign `σ(i, j)` in `{-1, +1}`.
    pub fn sign_of(&self, i: u64, j: usize) -> f64 {
        self.keys().sign_of(i, j)
    }

    /// Scaling factor `t_i`, uniform on the open interval (0, 1).
    pub fn scale_of(&self, i: u64) -> f64 {
        self.keys().scale_of(i)
    }
}

/// Expanded form of a [`SeedSet`] with one key per hash domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedKeys {
    bucket: u64,
    sign: u64,
    scale: u64,
    aux: u64,
}

#[inline]
fn hash2(key: u64, a: u64, b: u64) -> u64 {
    let h = mix64(key.wrapping_add(a));
    mix64(h ^ b.wrapping_mul(0xc4ce_b9fe_1a85_ec53).wrapping_add(0x2545_f491_4f6c_dd1d))
}

impl SeedKeys {
    #[inline]
    pub fn bucket_of(&self, i: u64, j: usize, r: usize) -> usize {
        debug_assert!(r >= 1);
        let h = hash2(self.bucket, i, j as u64);
        ((u128::from(h) * r as u128) >> 64) as usize
    }

    #[inline]
    pub fn sign_of(&self, i: u64, j: usize) -> f64 {
        if hash2(self.sign, i, j as u64) >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn scale_of(&self, i: u64) -> f64 {
        unit_open(hash2(self.scale, i, 0))
    }

    /// Uniform on (0, 1) keyed by two indices and a stream number.
    #[inline]
    pub fn uniform_aux(&self, a: u64, b: u64, stream: u64) -> f64 {
        unit_open(self.raw_aux(a, b, stream))
    }

    #[inline]
    pub fn raw_aux(&self, a: u64, b: u64, stream: u64) -> u64 {
        hash2(self.aux ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15), a, b)
    }
}

/// Free-function forms matching the operation names.
pub fn bucket_of(seeds: &SeedSet, i: u64, j: usize, r: usize) -> usize {
    seeds.bucket_of(i, j, r)
}

pub fn sign_of(seeds: &SeedSet, i: u64, j: usize) -> f64 {
    seeds.sign_of(i, j)
}

pub fn scale_of(seeds: &SeedSet, i: u64) -> f64 {
    seeds.scale_of(i)
}

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash to `(2k + 1) / 2^53` with `k` the top 52 bits, which is exact in
/// f64 and never touches 0 or 1.
#[inline]
fn unit_open(h: u64) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    (((h >> 12) << 1) | 1) as f64 * SCALE
}
