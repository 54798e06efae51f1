//! Vocabulary-level value types shared by every watermarking component.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) == 1` accepted by [`ProbVector::new`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Index of a token in a vocabulary of size `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
#[repr(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Converts raw integers into token ids.
pub fn tokens(raw: &[u32]) -> Vec<TokenId> {
    raw.iter().copied().map(TokenId).collect()
}

/// A probability distribution over the vocabulary.
///
/// Construction never renormalizes silently: [`ProbVector::new`] rejects
/// vectors whose sum is off by more than [`PROB_SUM_TOL`], and callers that
/// hold unnormalized weights must go through [`ProbVector::normalized`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOL}"
            )));
        }
        Ok(ProbVector { probs })
    }

    /// Builds a distribution by explicitly rescaling non-negative weights.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        validate_entries(&weights)?;
        let sum: f64 = weights.iter().sum();
        if sum.is_nan() || sum <= 0.0 || !sum.is_finite() {
            return Err(Error::invalid(format!("cannot normalize weights with sum {sum}")));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(ProbVector { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("vocabulary size must be at least 1"));
        }
        Ok(ProbVector {
            probs: vec![1.0 / n as f64; n],
        })
    }

    /// All mass on a single token.
    pub fn point_mass(n: usize, token: TokenId) -> Result<Self> {
        if token.index() >= n {
            return Err(Error::invalid(format!("token {token} outside vocabulary of size {n}")));
        }
        let mut probs = vec![0.0; n];
        probs[token.index()] = 1.0;
        Ok(ProbVector { probs })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }

    /// Inverse-CDF draw at quantile `u` in `[0,1)`. Never returns a zero-mass token.
    pub fn sample_at(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        let mut last_nonzero = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_nonzero = i;
                if u < acc {
                    return TokenId(i as u32);
                }
            }
        }
        TokenId(last_nonzero as u32)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        self.sample_at(rng.gen::<f64>())
    }

    /// Total-variation distance `0.5 * sum |p - q|`.
    pub fn total_variation(&self, other: &[f64]) -> f64 {
        assert_eq!(self.len(), other.len(), "distribution size mismatch");
        0.5 * self
            .probs
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

fn validate_entries(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if v.len() > u32::MAX as usize {
        return Err(Error::invalid("vocabularies above 2^32 tokens are unsupported"));
    }
    if let Some((i, p)) = v.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(Error::invalid(format!("entry {i} is {p}; probabilities must be finite and non-negative")));
    }
    Ok(())
}

/// Secret watermark key.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct WatermarkKey(Vec<u8>);

impl WatermarkKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(Error::invalid("watermark key must be non-empty"));
        }
        Ok(WatermarkKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WatermarkKey(<{} bytes>)", self.0.len())
    }
}

impl std::str::FromStr for WatermarkKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WatermarkKey::new(s.as_bytes().to_vec())
    }
}

/// Per-step watermark code: the key together with the preceding n-gram.
///
/// The n-gram length is the context length. The only zero-length context is
/// the global code built by [`WatermarkCode::global`], used by watermarks
/// whose randomness does not depend on position.
#[derive(Debug, Clone, Copy)]
pub struct WatermarkCode<'a> {
    key: &'a WatermarkKey,
    context: &'a [TokenId],
}

impl<'a> WatermarkCode<'a> {
    pub fn new(key: &'a WatermarkKey, context: &'a [TokenId]) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::invalid("watermark code needs an n-gram context of length >= 1"));
        }
        Ok(WatermarkCode { key, context })
    }

    pub fn global(key: &'a WatermarkKey) -> Self {
        WatermarkCode { key, context: &[] }
    }

    /// Code for position `pos` of `seq`, or `None` when fewer than `n` tokens precede it.
    pub fn at(key: &'a WatermarkKey, seq: &'a [TokenId], pos: usize, n: usize) -> Option<Self> {
        if n == 0 || pos < n || pos > seq.len() {
            return None;
        }
        Some(WatermarkCode {
            key,
            context: &seq[pos - n..pos],
        })
    }

    pub fn key(&self) -> &'a WatermarkKey {
        self.key
    }

    pub fn context(&self) -> &'a [TokenId] {
        self.context
    }

    pub fn ngram_n(&self) -> usize {
        self.context.len()
    }
}

/// The set of watermark codes already used to bias sampling.
#[derive(Debug, Clone, Default)]
pub struct CodeHistory {
    seen: HashSet<u64>,
}

impl CodeHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` if the fingerprint was not present before.
    pub fn insert(&mut self, fingerprint: u64) -> bool {
        self.seen.insert(fingerprint)
    }

    pub fn contains(&self, fingerprint: u64) -> bool {
        self.seen.contains(&fingerprint)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn clear(&mut self) {
        self.seen.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob_vector_rejects_negative_and_unnormalized() {
        assert!(ProbVector::new(vec![0.5, -0.1, 0.6]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        let p = ProbVector::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(p.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn explicit_normalization() {
        let p = ProbVector::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.25, 0.75]);
        assert!(ProbVector::normalized(vec![0.0, 0.0]).is_err());
        assert!(ProbVector::normalized(vec![-1.0, 2.0]).is_err());
    }

    #[test]
    fn sample_at_skips_zero_mass() {
        let p = ProbVector::new(vec![0.0, 0.5, 0.0, 0.5]).unwrap();
        assert_eq!(p.sample_at(0.0), TokenId(1));
        assert_eq!(p.sample_at(0.49), TokenId(1));
        assert_eq!(p.sample_at(0.5), TokenId(3));
        assert_eq!(p.sample_at(0.999_999), TokenId(3));
    }

    #[test]
    fn empty_key_rejected() {
        assert!(WatermarkKey::new(Vec::new()).is_err());
        assert!("".parse::<WatermarkKey>().is_err());
    }

    #[test]
    fn code_requires_context() {
        let key = WatermarkKey::new("k").unwrap();
        assert!(WatermarkCode::new(&key, &[]).is_err());
        let seq = tokens(&[4, 5, 6]);
        assert!(WatermarkCode::at(&key, &seq, 0, 1).is_none());
        let c = WatermarkCode::at(&key, &seq, 2, 2).unwrap();
        assert_eq!(c.context(), &seq[0..2]);
        assert_eq!(c.ngram_n(), 2);
    }

    #[test]
    fn history_insert_is_idempotent() {
        let mut h = CodeHistory::new();
        assert!(h.insert(7));
        assert!(!h.insert(7));
        assert!(h.contains(7));
        assert!(!h.contains(8));
        assert_eq!(h.len(), 1);
    }
}
