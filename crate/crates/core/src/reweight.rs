//! Reweight strategies: maps from a next-token distribution and a watermark
//! code to a (possibly) watermarked sampling rule.
//!
//! The clustered strategy is aligned inverse sampling. The unit interval is
//! split into `h` equal bins, bin `i` belonging to cluster `i`. Each cluster
//! first claims `min(Pr(c_i), 1/h)` at the start of its own bin. Clusters
//! with more than `1/h` of mass spill the excess into the unused tails of
//! the other bins. A code's number `r` then picks a segment, and the token
//! is drawn from that segment's cluster with the model's conditional
//! probabilities. Every cluster still owns exactly `Pr(c_i)` of the
//! interval, so averaging over `r` recovers the model distribution, while a
//! detector that knows only `r` and the token's cluster can test whether
//! `r` fell into that cluster's bin.
//!
//! Baselines:
//! * KGW / Unigram: green-list logit boost by `delta` (biased).
//! * DiPmark: permuted-CDF reweight with parameter `alpha`. The
//!   gamma-reweight scheme is the `alpha = 0.5` special case and is exposed
//!   through [`gamma_reweight`].
//! * ITS: plain inverse-transform sampling over a keyed vocabulary
//!   permutation. Detection uses a position score, not edit-distance alignment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterMap;
use crate::error::{Error, Result};
use crate::prf::{prf_permutation, prf_r};
use crate::token::{ProbVector, TokenId, WatermarkCode, WatermarkKey, PROB_SUM_TOL};

/// Per-cluster probability mass `Pr(c_i) = sum of P(x) over x in c_i`.
pub fn cluster_probs(dist: &ProbVector, map: &ClusterMap) -> Result<Vec<f64>> {
    if dist.len() != map.n_tokens() {
        return Err(Error::invalid(format!(
            "distribution has {} entries but the cluster map covers {} tokens",
            dist.len(),
            map.n_tokens()
        )));
    }
    let mut mass = vec![0.0; map.h()];
    for (&c, &p) in map.assignment().iter().zip(dist.as_slice()) {
        mass[c as usize] += p;
    }
    Ok(mass)
}

/// One piece of the rearranged unit interval, half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub cluster: usize,
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Exact tiling of `[0, 1)` realizing aligned inverse sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTable {
    segments: Vec<Segment>,
    h: usize,
}

impl SegmentTable {
    pub fn build(cluster_probs: &[f64]) -> Result<Self> {
        let h = cluster_probs.len();
        if h == 0 {
            return Err(Error::invalid("segment table needs at least one cluster"));
        }
        if cluster_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("cluster probabilities must be finite and non-negative"));
        }
        let total: f64 = cluster_probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("cluster probabilities sum to {total}, expected 1")));
        }

        let width = 1.0 / h as f64;
        // Donors: descending overflow, ties by ascending index.
        let mut donors: Vec<(usize, f64)> = cluster_probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > width)
            .map(|(i, &p)| (i, p - width))
            .collect();
        donors.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut segments = Vec::with_capacity(2 * h);
        let mut next_donor = 0;
        for (i, &p) in cluster_probs.iter().enumerate() {
            let lo = i as f64 / h as f64;
            let hi = (i + 1) as f64 / h as f64;
            let mut cursor = lo;
            if p > 0.0 {
                let end = if p >= width { hi } else { (lo + p).min(hi) };
                segments.push(Segment { cluster: i, start: lo, end });
                cursor = end;
            }
            while cursor < hi {
                while next_donor < donors.len() && donors[next_donor].1 <= 0.0 {
                    next_donor += 1;
                }
                let Some(donor) = donors.get_mut(next_donor) else {
                    // Rounding residue: overflow ran out a few ulps early.
                    match segments.last_mut() {
                        Some(last) => last.end = hi,
                        None => segments.push(Segment { cluster: i, start: lo, end: hi }),
                    }
                    break;
                };
                let deficit = hi - cursor;
                let take = deficit.min(donor.1);
                let end = if take >= deficit { hi } else { cursor + take };
                segments.push(Segment {
                    cluster: donor.0,
                    start: cursor,
                    end,
                });
                donor.1 -= take;
                cursor = end;
            }
        }
        segments.retain(|s| s.end > s.start);
        Ok(SegmentTable { segments, h })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Segment containing `r`.
    pub fn locate(&self, r: f64) -> Result<&Segment> {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::invalid(format!("r = {r} is outside [0, 1)")));
        }
        let idx = self.segments.partition_point(|s| s.end <= r);
        Ok(&self.segments[idx.min(self.segments.len() - 1)])
    }

    /// Total interval length owned by each cluster.
    pub fn cluster_lengths(&self) -> Vec<f64> {
        let mut len = vec![0.0; self.h];
        for s in &self.segments {
            len[s.cluster] += s.len();
        }
        len
    }

    /// Length of the interval where a segment's cluster matches the bin it lies in.
    /// This is the probability that a watermarked step scores 1.
    pub fn aligned_mass(&self) -> f64 {
        self.segments
            .iter()
            .filter(|s| bin_of(s.start, self.h) == s.cluster)
            .map(Segment::len)
            .sum()
    }
}

#[inline]
fn bin_of(r: f64, h: usize) -> usize {
    ((r * h as f64) as usize).min(h - 1)
}

/// Draws a token with aligned inverse sampling at pseudo-random position `r`.
pub fn aligned_sample<R: Rng + ?Sized>(
    table: &SegmentTable,
    dist: &ProbVector,
    map: &ClusterMap,
    r: f64,
    rng: &mut R,
) -> Result<TokenId> {
    let cluster = table.locate(r)?.cluster;
    Ok(sample_within_cluster(dist, map, cluster, rng))
}

/// Draw from `dist` conditioned on membership in `cluster`.
pub fn sample_within_cluster<R: Rng + ?Sized>(dist: &ProbVector, map: &ClusterMap, cluster: usize, rng: &mut R) -> TokenId {
    let members = map.members(cluster);
    let mass: f64 = members.iter().map(|&t| dist.prob(t)).sum();
    let target = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    let mut fallback = members[0];
    for &t in members {
        let p = dist.prob(t);
        if p > 0.0 {
            acc += p;
            fallback = t;
            if target < acc {
                return t;
            }
        }
    }
    fallback
}

/// Exact marginal of aligned sampling when `r` is uniform on `[0, 1)`.
pub fn aligned_marginal(table: &SegmentTable, dist: &ProbVector, map: &ClusterMap) -> Result<Vec<f64>> {
    let mass = cluster_probs(dist, map)?;
    let lengths = table.cluster_lengths();
    Ok(dist
        .as_slice()
        .iter()
        .zip(map.assignment())
        .map(|(&p, &c)| {
            let c = c as usize;
            if mass[c] > 0.0 {
                lengths[c] * p / mass[c]
            } else {
                0.0
            }
        })
        .collect())
}

/// Detection score: 1 iff `r` lies in the bin `[i/h, (i+1)/h)` of the token's cluster `i`.
#[inline]
pub fn aligned_score(r: f64, token: TokenId, map: &ClusterMap) -> u8 {
    u8::from(bin_of(r, map.h()) == map.cluster_of(token))
}

/// `ceil(frac * n)`, robust to representation error in `frac`.
pub(crate) fn fraction_count(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let rounded = x.round();
    let c = if (x - rounded).abs() < 1e-9 { rounded } else { x.ceil() };
    (c as usize).min(n)
}

/// Membership mask of a keyed green list.
#[derive(Debug, Clone)]
pub struct GreenList {
    mask: Vec<bool>,
    size: usize,
}

impl GreenList {
    /// The first `ceil(gamma * n)` tokens of the keyed permutation.
    pub fn new(code: &WatermarkCode<'_>, n: usize, gamma: f64) -> Self {
        Self::from_permutation(&prf_permutation(code, n), gamma)
    }

    pub fn from_permutation(perm: &[u32], gamma: f64) -> Self {
        let size = fraction_count(gamma, perm.len());
        let mut mask = vec![false; perm.len()];
        for &t in &perm[..size] {
            mask[t as usize] = true;
        }
        GreenList { mask, size }
    }

    #[inline]
    pub fn contains(&self, token: TokenId) -> bool {
        self.mask[token.index()]
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Multiplies green probabilities by `exp(delta)` and renormalizes.
    pub fn boost(&self, dist: &ProbVector, delta: f64) -> Result<ProbVector> {
        if dist.len() != self.mask.len() {
            return Err(Error::invalid("green list and distribution sizes differ"));
        }
        let factor = delta.exp();
        let weights = dist
            .as_slice()
            .iter()
            .zip(&self.mask)
            .map(|(&p, &g)| if g { p * factor } else { p })
            .collect();
        ProbVector::normalized(weights)
    }
}

fn check_kgw_params(delta: f64, gamma: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be finite and >= 0, got {delta}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

pub fn kgw_reweight(dist: &ProbVector, code: &WatermarkCode<'_>, delta: f64, gamma: f64) -> Result<ProbVector> {
    check_kgw_params(delta, gamma)?;
    GreenList::new(code, dist.len(), gamma).boost(dist, delta)
}

/// KGW with a single context-free green list derived from the key.
pub fn unigram_reweight(dist: &ProbVector, key: &WatermarkKey, delta: f64, gamma: f64) -> Result<ProbVector> {
    check_kgw_params(delta, gamma)?;
    GreenList::new(&WatermarkCode::global(key), dist.len(), gamma).boost(dist, delta)
}

/// DiPmark reweight applied to the distribution laid out in `perm` order.
pub fn dipmark_reweight_permuted(dist: &ProbVector, perm: &[u32], alpha: f64) -> Result<ProbVector> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 0.5], got {alpha}")));
    }
    if perm.len() != dist.len() {
        return Err(Error::invalid("permutation and distribution sizes differ"));
    }
    let clamp = |f: f64, a: f64| (f - a).max(0.0);
    let mut out = vec![0.0; dist.len()];
    let mut prev = 0.0;
    for &t in perm {
        let f = prev + dist.as_slice()[t as usize];
        out[t as usize] =
            (clamp(f, alpha) - clamp(prev, alpha)) + (clamp(f, 1.0 - alpha) - clamp(prev, 1.0 - alpha));
        prev = f;
    }
    ProbVector::new(out)
}

pub fn dipmark_reweight(dist: &ProbVector, code: &WatermarkCode<'_>, alpha: f64) -> Result<ProbVector> {
    dipmark_reweight_permuted(dist, &prf_permutation(code, dist.len()), alpha)
}

/// Gamma-reweight: DiPmark at `alpha = 0.5`.
pub fn gamma_reweight(dist: &ProbVector, code: &WatermarkCode<'_>) -> Result<ProbVector> {
    dipmark_reweight(dist, code, 0.5)
}

/// Inverse-transform draw at quantile `r` over the vocabulary in `perm` order.
pub fn its_sample_permuted(dist: &ProbVector, perm: &[u32], r: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last = perm[0];
    for &t in perm {
        let p = dist.as_slice()[t as usize];
        if p > 0.0 {
            acc += p;
            last = t;
            if r < acc {
                return TokenId(t);
            }
        }
    }
    TokenId(last)
}

pub fn its_sample(dist: &ProbVector, code: &WatermarkCode<'_>) -> TokenId {
    its_sample_permuted(dist, &prf_permutation(code, dist.len()), prf_r(code))
}

/// Exact marginal of ITS sampling when `r` is uniform: each token owns the CDF step it spans.
pub fn its_marginal(dist: &ProbVector, perm: &[u32]) -> Vec<f64> {
    let mut out = vec![0.0; dist.len()];
    let mut prev = 0.0f64;
    for &t in perm {
        let next = (prev + dist.as_slice()[t as usize]).min(1.0);
        out[t as usize] = next - prev;
        prev = next;
    }
    out
}

/// Position score `1 - |r - u|` with `u = (rank + 0.5) / n`.
#[inline]
pub fn its_score_rank(r: f64, rank: usize, n: usize) -> f64 {
    let u = (rank as f64 + 0.5) / n as f64;
    1.0 - (r - u).abs()
}

pub fn its_score(r: f64, token: TokenId, code: &WatermarkCode<'_>, n: usize) -> f64 {
    let perm = prf_permutation(code, n);
    let rank = perm.iter().position(|&t| t == token.0).expect("token inside vocabulary");
    its_score_rank(r, rank, n)
}

/// Strategy selection with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReweightConfig {
    AlignedIs { h: usize },
    Its {},
    Kgw { delta: f64, gamma: f64 },
    Unigram { delta: f64, gamma: f64 },
    Dipmark { alpha: f64 },
    GammaReweight {},
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReweightConfig::AlignedIs { h: 0 } => Err(Error::invalid("aligned_is needs h >= 1")),
            ReweightConfig::Kgw { delta, gamma } | ReweightConfig::Unigram { delta, gamma } => {
                check_kgw_params(delta, gamma)
            }
            ReweightConfig::Dipmark { alpha } if !(0.0..=0.5).contains(&alpha) => {
                Err(Error::invalid(format!("dipmark alpha must lie in [0, 0.5], got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Short machine-friendly name, e.g. `kgw`.
    pub fn name(&self) -> &'static str {
        match self {
            ReweightConfig::AlignedIs { .. } => "aligned_is",
            ReweightConfig::Its {} => "its",
            ReweightConfig::Kgw { .. } => "kgw",
            ReweightConfig::Unigram { .. } => "unigram",
            ReweightConfig::Dipmark { .. } => "dipmark",
            ReweightConfig::GammaReweight {} => "gamma_reweight",
        }
    }

    /// Parameter string used in result tables.
    pub fn params(&self) -> String {
        match *self {
            ReweightConfig::AlignedIs { h } => format!("h={h}"),
            ReweightConfig::Its {} | ReweightConfig::GammaReweight {} => String::new(),
            ReweightConfig::Kgw { delta, gamma } | ReweightConfig::Unigram { delta, gamma } => {
                format!("delta={delta};gamma={gamma}")
            }
            ReweightConfig::Dipmark { alpha } => format!("alpha={alpha}"),
        }
    }

    /// Whether averaging over keys reproduces the model distribution.
    pub fn is_distortion_free(&self) -> bool {
        !matches!(self, ReweightConfig::Kgw { .. } | ReweightConfig::Unigram { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::tokens;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_of(assignment: &[u32]) -> ClusterMap {
        let h = *assignment.iter().max().unwrap() as usize + 1;
        ClusterMap::new(h, assignment.to_vec(), vec![vec![0.0]; h], 0).unwrap()
    }

    fn approx_segments(table: &SegmentTable, expected: &[(usize, f64, f64)]) {
        let got = table.segments();
        assert_eq!(got.len(), expected.len(), "{got:?}");
        for (s, &(c, a, b)) in got.iter().zip(expected) {
            assert_eq!(s.cluster, c);
            assert!((s.start - a).abs() < 1e-15 && (s.end - b).abs() < 1e-15, "{s:?}");
        }
    }

    #[test]
    fn two_cluster_table() {
        let t = SegmentTable::build(&[0.7, 0.3]).unwrap();
        approx_segments(&t, &[(0, 0.0, 0.5), (1, 0.5, 0.8), (0, 0.8, 1.0)]);
        let len = t.cluster_lengths();
        assert!((len[0] - 0.7).abs() < 1e-12 && (len[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn uniform_table_has_no_fillers() {
        let h = 7;
        let t = SegmentTable::build(&vec![1.0 / h as f64; h]).unwrap();
        assert_eq!(t.segments().len(), h);
        for (i, s) in t.segments().iter().enumerate() {
            assert_eq!(s.cluster, i);
        }
    }

    #[test]
    fn point_mass_cluster_owns_everything() {
        let t = SegmentTable::build(&[1.0, 0.0, 0.0]).unwrap();
        assert!(t.segments().iter().all(|s| s.cluster == 0));
        assert_eq!(t.segments().first().unwrap().start, 0.0);
        assert_eq!(t.segments().last().unwrap().end, 1.0);
        assert!((t.aligned_mass() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn build_rejects_bad_probs() {
        assert!(SegmentTable::build(&[]).is_err());
        assert!(SegmentTable::build(&[0.5, 0.4]).is_err());
        assert!(SegmentTable::build(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn locate_is_half_open() {
        let t = SegmentTable::build(&[0.7, 0.3]).unwrap();
        assert_eq!(t.locate(0.5).unwrap().cluster, 1);
        assert_eq!(t.locate(0.4999).unwrap().cluster, 0);
        assert_eq!(t.locate(0.9).unwrap().cluster, 0);
        assert!(t.locate(1.0).is_err());
        assert!(t.locate(-0.1).is_err());
    }

    #[test]
    fn cluster_probs_cases() {
        let map = map_of(&[0, 0, 1, 1, 2, 2]);
        let u = ProbVector::uniform(6).unwrap();
        for m in cluster_probs(&u, &map).unwrap() {
            assert!((m - 1.0 / 3.0).abs() < 1e-15);
        }
        let point = ProbVector::point_mass(6, TokenId(3)).unwrap();
        assert_eq!(cluster_probs(&point, &map).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(cluster_probs(&ProbVector::uniform(5).unwrap(), &map).is_err());
    }

    #[test]
    fn single_cluster_sampling_ignores_r() {
        let map = map_of(&[0, 0, 0]);
        let dist = ProbVector::new(vec![0.2, 0.0, 0.8]).unwrap();
        let table = SegmentTable::build(&cluster_probs(&dist, &map).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for i in 0..20_000 {
            let r = (i as f64 + 0.5) / 20_000.0;
            counts[aligned_sample(&table, &dist, &map, r, &mut rng).unwrap().index()] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 20_000.0 - 0.2).abs() < 0.015);
    }

    #[test]
    fn aligned_score_boundaries() {
        // Token 4 in (0-based) cluster 4, i.e. the fifth bin [0.20, 0.25) for h = 20.
        let assignment: Vec<u32> = (0..20).collect();
        let map = map_of(&assignment);
        assert_eq!(aligned_score(0.21, TokenId(4), &map), 1);
        assert_eq!(aligned_score(0.25, TokenId(4), &map), 0);
        assert_eq!(aligned_score(0.20, TokenId(4), &map), 1);
        assert_eq!(aligned_score(0.199_999, TokenId(4), &map), 0);
    }

    #[test]
    fn kgw_hand_example() {
        let key = WatermarkKey::new("k").unwrap();
        let ctx = tokens(&[0]);
        let code = WatermarkCode::new(&key, &ctx).unwrap();
        let dist = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let green = GreenList::new(&code, 2, 0.5);
        let out = green.boost(&dist, 3f64.ln()).unwrap();
        let g = if green.contains(TokenId(0)) { 0 } else { 1 };
        assert!((out.as_slice()[g] - 0.75).abs() < 1e-12);
        assert!((out.as_slice()[1 - g] - 0.25).abs() < 1e-12);
        assert_eq!(kgw_reweight(&dist, &code, 0.0, 0.5).unwrap(), dist);
        assert!(kgw_reweight(&dist, &code, 1.0, 1.0).is_err());
    }

    #[test]
    fn dipmark_hand_examples() {
        let dist = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let out = dipmark_reweight_permuted(&dist, &[0, 1], 0.5).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 1.0]);
        let dist = ProbVector::new(vec![0.1, 0.6, 0.3]).unwrap();
        let out = dipmark_reweight_permuted(&dist, &[2, 0, 1], 0.0).unwrap();
        for (a, b) in out.as_slice().iter().zip(dist.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(dipmark_reweight_permuted(&dist, &[2, 0, 1], 0.6).is_err());
    }

    #[test]
    fn its_edge_cases() {
        let dist = ProbVector::new(vec![0.0, 0.4, 0.6]).unwrap();
        assert_eq!(its_sample_permuted(&dist, &[0, 2, 1], 0.0), TokenId(2));
        let one = ProbVector::uniform(1).unwrap();
        let key = WatermarkKey::new("k").unwrap();
        let ctx = tokens(&[0]);
        let code = WatermarkCode::new(&key, &ctx).unwrap();
        assert_eq!(its_sample(&one, &code), TokenId(0));
        let r = 0.3;
        assert!((its_score(r, TokenId(0), &code, 1) - (1.0 - (r - 0.5f64).abs())).abs() < 1e-15);
    }

    #[test]
    fn config_serde_requires_exact_params() {
        let c: ReweightConfig = serde_json::from_str(r#"{"strategy":"kgw","delta":2.0,"gamma":0.5}"#).unwrap();
        assert_eq!(c, ReweightConfig::Kgw { delta: 2.0, gamma: 0.5 });
        let c: ReweightConfig = serde_json::from_str(r#"{"strategy":"aligned_is","h":20}"#).unwrap();
        assert_eq!(c, ReweightConfig::AlignedIs { h: 20 });
        assert!(serde_json::from_str::<ReweightConfig>(r#"{"strategy":"kgw","delta":2.0}"#).is_err());
        assert!(serde_json::from_str::<ReweightConfig>(r#"{"strategy":"its","alpha":0.3}"#).is_err());
        assert!(ReweightConfig::Dipmark { alpha: 0.7 }.validate().is_err());
        assert!(ReweightConfig::Kgw { delta: 1.0, gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn fraction_count_rounding() {
        assert_eq!(fraction_count(0.4, 500), 200);
        assert_eq!(fraction_count(0.5, 3), 2);
        assert_eq!(fraction_count(0.3, 10), 3);
    }
}
