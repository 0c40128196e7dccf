//! Keyed noise streams.
//!
//! Every random draw in the crate comes from a [`NoiseStream`] identified by
//! `(run_id, step, level, particle, role)`. The tuple is hashed into a
//! 256-bit xoshiro256++ state, so the draws of a stream depend only on its
//! tuple and never on evaluation order or thread schedule. A coarse/fine pair
//! shares one tuple and therefore one noise realization.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum StreamRole {
    /// Filter initial ensemble draw.
    Initial = 1,
    /// Filter model noise.
    Dynamics = 2,
    /// Filter perturbed observations.
    Perturbation = 3,
    /// Truth initial condition.
    TruthInitial = 4,
    /// Truth model noise.
    TruthDynamics = 5,
    /// Observation noise added to the truth.
    TruthObservation = 6,
}

impl StreamRole {
    pub fn is_truth(self) -> bool {
        matches!(self, StreamRole::TruthInitial | StreamRole::TruthDynamics | StreamRole::TruthObservation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoiseStream {
    pub run_id: u64,
    pub step: u64,
    pub level: u32,
    pub particle: u64,
    pub role: StreamRole,
}

/// Chain offsets; each state word hashes the whole tuple.
const LANES: [u64; 4] = [0x243f_6a88_85a3_08d3, 0x1319_8a2e_0370_7344, 0xa409_3822_299f_31d0, 0x082e_fa98_ec4e_6c89];

impl NoiseStream {
    pub fn new(run_id: u64, step: u64, level: usize, particle: usize, role: StreamRole) -> Self {
        Self { run_id, step, level: level as u32, particle: particle as u64, role }
    }

    /// Generator state: four independent 64-bit digests of the tuple.
    pub fn seed(&self) -> [u8; 32] {
        NoiseFamily::new(self.run_id, self.step, self.level as usize, self.role).seed(self.particle)
    }

    pub fn rng(&self) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::from_seed(self.seed())
    }

    /// The stream's standard normal sequence `z_1, z_2, …`.
    pub fn normals(&self) -> Normals {
        Normals { rng: self.rng() }
    }
}

/// The streams of all particles sharing `(run_id, step, level, role)`.
/// `family.normals(i)` equals `NoiseStream::new(.., i, role).normals()`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseFamily {
    prefix: [u64; 4],
}

impl NoiseFamily {
    pub fn new(run_id: u64, step: u64, level: usize, role: StreamRole) -> Self {
        let tag = (level as u64) << 8 | role as u64;
        let prefix = LANES.map(|lane| [run_id, step, tag].iter().fold(mix64(lane), |acc, &w| mix64(acc ^ w)));
        Self { prefix }
    }

    #[inline]
    fn seed(&self, particle: u64) -> [u8; 32] {
        let mut seed = [0u8; 32];
        for (h, out) in self.prefix.iter().zip(seed.chunks_exact_mut(8)) {
            out.copy_from_slice(&mix64(h ^ particle).to_le_bytes());
        }
        seed
    }

    #[inline]
    pub fn normals(&self, particle: usize) -> Normals {
        Normals { rng: Xoshiro256PlusPlus::from_seed(self.seed(particle as u64)) }
    }
}

/// Iterator over the standard normals of one stream.
#[derive(Debug, Clone)]
pub struct Normals {
    rng: Xoshiro256PlusPlus,
}

impl Iterator for Normals {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        Some(StandardNormal.sample(&mut self.rng))
    }
}

/// SplitMix64 finalizer; derives sub-run identifiers from a seed.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Run id for a labelled sub-run of `seed`, e.g. replicate `r` of block `b`.
pub fn derive_run_id(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}
