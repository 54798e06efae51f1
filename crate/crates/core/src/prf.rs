//! Keyed pseudo-random functions of a watermark code.
//!
//! Every function hashes the same byte layout with SHA-256:
//!
//! ```text
//! key bytes || domain byte || n-gram length (u32 BE) || context token ids (u32 BE each)
//! ```
//!
//! Domain bytes: `0x00` code fingerprint, `0x01` the number `r`, `0x02` the
//! permutation stream (each block additionally appends its counter as u32 BE).
//! The layout is fixed so that other implementations reproduce the same values bit for bit.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::token::WatermarkCode;

const DOMAIN_FINGERPRINT: u8 = 0x00;
const DOMAIN_UNIT: u8 = 0x01;
const DOMAIN_PERMUTATION: u8 = 0x02;

fn hasher_for(code: &WatermarkCode<'_>, domain: u8) -> Sha256 {
    let mut h = Sha256::new();
    h.update(code.key().as_bytes());
    h.update([domain]);
    h.update((code.ngram_n() as u32).to_be_bytes());
    for t in code.context() {
        h.update(t.0.to_be_bytes());
    }
    h
}

fn leading_u64(digest: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(b)
}

/// 64-bit identity of a code, used for history membership.
pub fn code_fingerprint(code: &WatermarkCode<'_>) -> u64 {
    leading_u64(&hasher_for(code, DOMAIN_FINGERPRINT).finalize())
}

/// The pseudo-random number `r` in `[0, 1)` attached to a code.
pub fn prf_r(code: &WatermarkCode<'_>) -> f64 {
    let u = leading_u64(&hasher_for(code, DOMAIN_UNIT).finalize());
    unit_from_u64(u)
}

/// `u / 2^64`, clamped below 1. Conversion of `u` rounds to nearest, so the
/// top 2^10 values of `u` would otherwise land exactly on 1.0.
pub fn unit_from_u64(u: u64) -> f64 {
    const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    let r = u as f64 / 18_446_744_073_709_551_616.0;
    r.min(LARGEST_BELOW_ONE)
}

/// Counter-mode stream of `u32` words over the permutation domain.
struct WordStream {
    prefix: Sha256,
    counter: u32,
    block: [u8; 32],
    pos: usize,
}

impl WordStream {
    fn new(code: &WatermarkCode<'_>) -> Self {
        WordStream {
            prefix: hasher_for(code, DOMAIN_PERMUTATION),
            counter: 0,
            block: [0; 32],
            pos: 32,
        }
    }

    fn next_word(&mut self) -> u32 {
        if self.pos == 32 {
            let mut h = self.prefix.clone();
            h.update(self.counter.to_be_bytes());
            self.block.copy_from_slice(&h.finalize());
            self.counter += 1;
            self.pos = 0;
        }
        let w = u32::from_be_bytes(self.block[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        w
    }

    /// Unbiased draw from `[0, bound)` by rejection.
    fn below(&mut self, bound: u32) -> u32 {
        debug_assert!(bound > 0);
        let zone = u32::MAX - (u32::MAX - bound + 1) % bound;
        loop {
            let w = self.next_word();
            if w <= zone {
                return w % bound;
            }
        }
    }
}

/// Keyed Fisher-Yates shuffle of `[0, n)`.
pub fn prf_permutation(code: &WatermarkCode<'_>, n: usize) -> Vec<u32> {
    assert!(n >= 1 && n <= u32::MAX as usize, "permutation size must be in [1, 2^32)");
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut stream = WordStream::new(code);
    for i in (1..n).rev() {
        let j = stream.below(i as u32 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Inverse of a permutation: `rank[token] = position of token in perm`.
pub fn inverse_permutation(perm: &[u32]) -> Vec<u32> {
    let mut rank = vec![0u32; perm.len()];
    for (pos, &tok) in perm.iter().enumerate() {
        rank[tok as usize] = pos as u32;
    }
    rank
}

/// A keyed permutation together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    /// `order[position] = token`.
    pub order: Vec<u32>,
    /// `rank[token] = position`.
    pub rank: Vec<u32>,
}

impl Permutation {
    pub fn for_code(code: &WatermarkCode<'_>, n: usize) -> Self {
        let order = prf_permutation(code, n);
        let rank = inverse_permutation(&order);
        Permutation { order, rank }
    }
}

/// Bounded memo of permutations keyed by code fingerprint. After `capacity`
/// entries, new codes are computed but not retained.
#[derive(Debug)]
pub struct PermutationCache {
    n: usize,
    capacity: usize,
    entries: Mutex<HashMap<u64, Arc<Permutation>>>,
}

impl PermutationCache {
    pub const DEFAULT_CAPACITY: usize = 4096;

    pub fn new(n: usize, capacity: usize) -> Self {
        assert!(n >= 1, "permutation size must be at least 1");
        PermutationCache {
            n,
            capacity,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, code: &WatermarkCode<'_>) -> Arc<Permutation> {
        let fp = code_fingerprint(code);
        if let Some(p) = self.entries.lock().unwrap().get(&fp) {
            return p.clone();
        }
        let perm = Arc::new(Permutation::for_code(code, self.n));
        let mut entries = self.entries.lock().unwrap();
        if entries.len() < self.capacity {
            entries.insert(fp, perm.clone());
        }
        perm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::{tokens, WatermarkKey};

    #[test]
    fn fingerprint_distinguishes_context_and_key() {
        let k = WatermarkKey::new("k").unwrap();
        let k2 = WatermarkKey::new("k2").unwrap();
        let c1 = tokens(&[1]);
        let c2 = tokens(&[2]);
        let a = code_fingerprint(&WatermarkCode::new(&k, &c1).unwrap());
        let a2 = code_fingerprint(&WatermarkCode::new(&k, &c1).unwrap());
        let b = code_fingerprint(&WatermarkCode::new(&k, &c2).unwrap());
        let c = code_fingerprint(&WatermarkCode::new(&k2, &c1).unwrap());
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn permutation_trivial_and_bijective() {
        let k = WatermarkKey::new("k").unwrap();
        let ctx = tokens(&[9]);
        let code = WatermarkCode::new(&k, &ctx).unwrap();
        assert_eq!(prf_permutation(&code, 1), vec![0]);
        for n in [2usize, 3, 17, 500, 4096] {
            let p = prf_permutation(&code, n);
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..n as u32).collect::<Vec<_>>());
        }
        assert_eq!(prf_permutation(&code, 500), prf_permutation(&code, 500));
    }

    #[test]
    fn inverse_permutation_roundtrip() {
        let perm = vec![2u32, 0, 3, 1];
        let rank = inverse_permutation(&perm);
        for (pos, &t) in perm.iter().enumerate() {
            assert_eq!(rank[t as usize] as usize, pos);
        }
    }

    #[test]
    fn rejection_bound_is_unbiased_for_small_bounds() {
        let k = WatermarkKey::new("bias").unwrap();
        let ctx = tokens(&[1, 2, 3]);
        let mut s = WordStream::new(&WatermarkCode::new(&k, &ctx).unwrap());
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[s.below(3) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }

    #[test]
    fn cache_matches_direct_and_respects_capacity() {
        let k = WatermarkKey::new("cache").unwrap();
        let cache = PermutationCache::new(37, 2);
        for t in 0..5u32 {
            let ctx = tokens(&[t]);
            let code = WatermarkCode::new(&k, &ctx).unwrap();
            let p = cache.get(&code);
            assert_eq!(p.order, prf_permutation(&code, 37));
            assert_eq!(p.rank, inverse_permutation(&p.order));
            assert_eq!(*cache.get(&code), *p);
        }
        assert_eq!(cache.len(), 2);
    }
}
