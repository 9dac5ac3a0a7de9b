//! Seeded random streams.
//!
//! Every stochastic draw in the crate comes from a named substream derived
//! from one master seed, so any pipeline stage can be replayed in isolation
//! and checkpoint resume does not depend on RNG state carried in memory.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Scalar;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic per-purpose RNG: `substream(seed, "stage1.batch", step)`.
pub fn substream(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut state = master_seed
        ^ fnv1a(label.as_bytes()).rotate_left(1)
        ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn uniform_in(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_f64(rng)
}

/// Uniform integer in [0, n).
pub fn uniform_usize(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0);
    // Rejection-free modulo bias is negligible for n << 2^64; keep it exact anyway.
    let zone = u64::MAX - (u64::MAX % n as u64);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n as u64) as usize;
        }
    }
}

/// Standard normal draws via Box-Muller; deterministic for a given stream.
pub fn fill_standard_normal<T: Scalar>(rng: &mut impl RngCore, out: &mut [T]) {
    let mut i = 0;
    while i < out.len() {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - uniform_f64(rng);
        let u2 = uniform_f64(rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = T::of_f64(r * theta.cos());
        i += 1;
        if i < out.len() {
            out[i] = T::of_f64(r * theta.sin());
            i += 1;
        }
    }
}

pub fn standard_normal<T: Scalar>(rng: &mut impl RngCore) -> T {
    let mut buf = [T::zero()];
    fill_standard_normal(rng, &mut buf);
    buf[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let mut a = substream(7, "x", 0);
        let mut b = substream(7, "x", 0);
        let mut c = substream(7, "x", 1);
        let mut d = substream(7, "y", 0);
        assert_eq!(a.next_u64(), b.next_u64());
        let va = a.next_u64();
        assert_ne!(va, c.next_u64());
        assert_ne!(va, d.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut rng = substream(3, "normal", 0);
        let mut buf = vec![0.0f64; 200_000];
        fill_standard_normal(&mut rng, &mut buf);
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        let var = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / buf.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_usize_covers_range() {
        let mut rng = substream(1, "u", 0);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[uniform_usize(&mut rng, 7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
