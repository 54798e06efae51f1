//! Model-free detectors and their null statistics.
//!
//! Every detector recomputes the watermark code of each position from the
//! key and the preceding n-gram, scores the observed token, and sums the
//! scores. Only tokens, the key, and (for the clustered scheme) the cluster
//! map are consulted, never the model.
//!
//! Null models:
//! * aligned and DiPmark scores are Bernoulli under H0, so the Hoeffding
//!   bound `exp(-2t(S/t - p)^2)` gives a guaranteed threshold and the exact
//!   binomial tail gives a tighter p-value;
//! * KGW/Unigram use the one-proportion z-test on the green count;
//! * ITS position scores have no convenient closed-form null; its p-value and
//!   threshold come from a seeded Monte-Carlo simulation of the null sum and
//!   are estimates, not guarantees.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::clustering::ClusterMap;
use crate::error::{Error, Result};
use crate::prf::{code_fingerprint, prf_r, Permutation, PermutationCache};
use crate::reweight::{aligned_score, fraction_count, its_score_rank, GreenList};
use crate::token::{TokenId, WatermarkCode, WatermarkKey};

/// One scored position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub position: usize,
    pub r: f64,
    pub token: TokenId,
    pub score: f64,
}

/// Distribution of the summed score when the text carries no watermark.
#[derive(Debug, Clone)]
pub enum NullModel {
    /// Per-step scores are Bernoulli with this success rate.
    Bernoulli(f64),
    /// Green-token count, tested with the normal approximation at rate `gamma`.
    GreenZ(f64),
    /// Simulated null sums (sorted ascending) and the per-step null mean.
    Empirical { mean: f64, sorted: Arc<Vec<f64>> },
}

/// Summed score of one sequence together with its null model.
#[derive(Debug, Clone)]
pub struct ScoreSummary {
    pub strategy: String,
    pub score: f64,
    pub t: usize,
    pub null: NullModel,
    pub trace: Vec<StepScore>,
}

impl ScoreSummary {
    /// Per-step mean of the score under H0.
    pub fn null_rate(&self) -> f64 {
        match &self.null {
            NullModel::Bernoulli(p) | NullModel::GreenZ(p) => *p,
            NullModel::Empirical { mean, .. } => *mean,
        }
    }

    /// Rejection threshold for false-positive rate `fpr`: flag when `score > threshold`.
    pub fn threshold(&self, fpr: f64) -> f64 {
        match &self.null {
            NullModel::Bernoulli(p) => hoeffding_threshold(self.t, *p, fpr),
            NullModel::GreenZ(g) => {
                let t = self.t as f64;
                g * t + normal_quantile_upper(fpr) * (g * (1.0 - g) * t).sqrt()
            }
            NullModel::Empirical { sorted, .. } => empirical_threshold(sorted, fpr),
        }
    }

    pub fn p_hoeffding(&self) -> f64 {
        hoeffding_pvalue(self.score, self.t, self.null_rate())
    }

    /// Exact binomial tail for count-valued scores; the Monte-Carlo estimate for ITS.
    pub fn p_exact(&self) -> f64 {
        match &self.null {
            NullModel::Bernoulli(p) | NullModel::GreenZ(p) => {
                exact_binomial_pvalue(self.score.round() as u64, self.t as u64, *p)
            }
            NullModel::Empirical { sorted, .. } => empirical_pvalue(sorted, self.score),
        }
    }

    /// z-statistic of the green count, for the z-test detectors.
    pub fn z_stat(&self) -> Option<f64> {
        match self.null {
            NullModel::GreenZ(g) => {
                let t = self.t as f64;
                Some((self.score - g * t) / (g * (1.0 - g) * t).sqrt())
            }
            _ => None,
        }
    }

    pub fn is_flagged(&self, fpr: f64) -> bool {
        self.score > self.threshold(fpr)
    }

    pub fn report(&self, fpr: f64) -> DetectionReport {
        let threshold = self.threshold(fpr);
        let z = self.z_stat();
        DetectionReport {
            strategy: self.strategy.clone(),
            score: self.score,
            t: self.t,
            threshold,
            p_hoeffding: self.p_hoeffding(),
            p_exact: self.p_exact(),
            verdict: self.score > threshold,
            fpr,
            z,
            p_normal: z.map(normal_upper_tail),
            trace: self.trace.clone(),
        }
    }
}

/// Outcome of running one detector on one sequence at one false-positive rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub score: f64,
    pub t: usize,
    pub threshold: f64,
    pub p_hoeffding: f64,
    pub p_exact: f64,
    pub verdict: bool,
    pub strategy: String,
    pub fpr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_normal: Option<f64>,
    #[serde(skip)]
    pub trace: Vec<StepScore>,
}

fn check_fpr(fpr: f64) -> Result<()> {
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::invalid(format!("fpr must lie in (0, 1), got {fpr}")));
    }
    Ok(())
}

/// Positions with a full n-gram context, optionally skipping repeated codes.
fn scored_positions<'a>(
    tokens: &'a [TokenId],
    key: &'a WatermarkKey,
    ngram_n: usize,
    dedup: bool,
) -> Result<Vec<(usize, WatermarkCode<'a>)>> {
    if ngram_n == 0 {
        return Err(Error::invalid("n-gram length must be at least 1"));
    }
    if tokens.len() < ngram_n + 1 {
        return Err(Error::invalid(format!(
            "sequence has {} tokens; detection needs at least {} (n-gram length + 1)",
            tokens.len(),
            ngram_n + 1
        )));
    }
    let mut seen = std::collections::HashSet::new();
    Ok((ngram_n..tokens.len())
        .filter_map(|pos| {
            let code = WatermarkCode::at(key, tokens, pos, ngram_n)?;
            (!dedup || seen.insert(code_fingerprint(&code))).then_some((pos, code))
        })
        .collect())
}

/// Permutation for `code`, from the cache when one is supplied and matches `n`.
fn permutation(perms: Option<&PermutationCache>, code: &WatermarkCode<'_>, n: usize) -> Arc<Permutation> {
    match perms {
        Some(c) if c.n() == n => c.get(code),
        _ => Arc::new(Permutation::for_code(code, n)),
    }
}

fn summarize(strategy: &str, trace: Vec<StepScore>, null: NullModel) -> ScoreSummary {
    ScoreSummary {
        strategy: strategy.to_string(),
        score: trace.iter().map(|s| s.score).sum(),
        t: trace.len(),
        null,
        trace,
    }
}

/// Cluster-bin score summed over positions.
pub fn score_aligned(
    tokens: &[TokenId],
    key: &WatermarkKey,
    map: &ClusterMap,
    ngram_n: usize,
    dedup: bool,
) -> Result<ScoreSummary> {
    if let Some(bad) = tokens.iter().find(|t| t.index() >= map.n_tokens()) {
        return Err(Error::invalid(format!("token {bad} outside the clustered vocabulary")));
    }
    let trace = scored_positions(tokens, key, ngram_n, dedup)?
        .into_iter()
        .map(|(pos, code)| {
            let r = prf_r(&code);
            let token = tokens[pos];
            StepScore {
                position: pos,
                r,
                token,
                score: aligned_score(r, token, map) as f64,
            }
        })
        .collect();
    Ok(summarize("aligned_is", trace, NullModel::Bernoulli(1.0 / map.h() as f64)))
}

pub fn detect_aligned(
    tokens: &[TokenId],
    key: &WatermarkKey,
    map: &ClusterMap,
    ngram_n: usize,
    fpr: f64,
) -> Result<DetectionReport> {
    check_fpr(fpr)?;
    Ok(score_aligned(tokens, key, map, ngram_n, false)?.report(fpr))
}

fn check_vocab(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    if vocab_size == 0 {
        return Err(Error::invalid("vocabulary size must be at least 1"));
    }
    match tokens.iter().find(|t| t.index() >= vocab_size) {
        Some(bad) => Err(Error::invalid(format!("token {bad} outside vocabulary of size {vocab_size}"))),
        None => Ok(()),
    }
}

/// Green-token count. With `context_free` the green list depends on the key only (Unigram).
#[allow(clippy::too_many_arguments)]
pub fn score_green(
    tokens: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    gamma: f64,
    ngram_n: usize,
    context_free: bool,
    dedup: bool,
    perms: Option<&PermutationCache>,
) -> Result<ScoreSummary> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    check_vocab(tokens, vocab_size)?;
    let global = context_free.then(|| GreenList::new(&WatermarkCode::global(key), vocab_size, gamma));
    let mut rate = 0.0;
    let trace = scored_positions(tokens, key, ngram_n, dedup)?
        .into_iter()
        .map(|(pos, code)| {
            let local;
            let green = match &global {
                Some(g) => g,
                None => {
                    local = GreenList::from_permutation(&permutation(perms, &code, vocab_size).order, gamma);
                    &local
                }
            };
            rate = green.size() as f64 / vocab_size as f64;
            StepScore {
                position: pos,
                r: f64::NAN,
                token: tokens[pos],
                score: if green.contains(tokens[pos]) { 1.0 } else { 0.0 },
            }
        })
        .collect();
    let name = if context_free { "unigram" } else { "kgw" };
    Ok(summarize(name, trace, NullModel::GreenZ(rate)))
}

pub fn detect_kgw(
    tokens: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    gamma: f64,
    ngram_n: usize,
    fpr: f64,
) -> Result<DetectionReport> {
    check_fpr(fpr)?;
    Ok(score_green(tokens, key, vocab_size, gamma, ngram_n, false, false, None)?.report(fpr))
}

pub fn detect_unigram(
    tokens: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    gamma: f64,
    ngram_n: usize,
    fpr: f64,
) -> Result<DetectionReport> {
    check_fpr(fpr)?;
    Ok(score_green(tokens, key, vocab_size, gamma, ngram_n, true, false, None)?.report(fpr))
}

/// Scores 1 when the token sits in the last `1 - alpha` fraction of the keyed permutation,
/// the region DiPmark's reweight moves mass into.
pub fn score_dipmark(
    tokens: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    alpha_detect: f64,
    ngram_n: usize,
    dedup: bool,
    perms: Option<&PermutationCache>,
) -> Result<ScoreSummary> {
    if !(0.0..1.0).contains(&alpha_detect) {
        return Err(Error::invalid(format!("alpha_detect must lie in [0, 1), got {alpha_detect}")));
    }
    check_vocab(tokens, vocab_size)?;
    let green_start = fraction_count(alpha_detect, vocab_size);
    let rate = (vocab_size - green_start) as f64 / vocab_size as f64;
    let trace = scored_positions(tokens, key, ngram_n, dedup)?
        .into_iter()
        .map(|(pos, code)| {
            let token = tokens[pos];
            let rank = permutation(perms, &code, vocab_size).rank[token.index()] as usize;
            StepScore {
                position: pos,
                r: f64::NAN,
                token,
                score: if rank >= green_start { 1.0 } else { 0.0 },
            }
        })
        .collect();
    Ok(summarize("dipmark", trace, NullModel::Bernoulli(rate)))
}

pub fn detect_dipmark(
    tokens: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    alpha_detect: f64,
    ngram_n: usize,
    fpr: f64,
) -> Result<DetectionReport> {
    check_fpr(fpr)?;
    Ok(score_dipmark(tokens, key, vocab_size, alpha_detect, ngram_n, false, None)?.report(fpr))
}

/// Seeded Monte-Carlo null for the ITS position score, cached per sequence length.
///
/// Under H0 the code's `r` is uniform and independent of the token, so each
/// term is `1 - |r - u|` with `r` uniform on `[0,1)` and `u` uniform on the
/// rank grid `(k + 0.5) / N`.
#[derive(Debug)]
pub struct ItsNull {
    vocab_size: usize,
    samples: usize,
    seed: u64,
    cache: Mutex<HashMap<usize, Arc<Vec<f64>>>>,
}

pub const ITS_NULL_SAMPLES: usize = 10_000;

impl ItsNull {
    pub fn new(vocab_size: usize, samples: usize, seed: u64) -> Self {
        assert!(vocab_size >= 1 && samples >= 1);
        ItsNull {
            vocab_size,
            samples,
            seed,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Exact per-step null mean on the rank grid.
    pub fn step_mean(&self) -> f64 {
        let n = self.vocab_size as f64;
        let e_abs: f64 = (0..self.vocab_size)
            .map(|k| {
                let u = (k as f64 + 0.5) / n;
                0.5 * (u * u + (1.0 - u) * (1.0 - u))
            })
            .sum::<f64>()
            / n;
        1.0 - e_abs
    }

    /// Sorted simulated null sums for sequences with `t` scored steps.
    pub fn sorted_sums(&self, t: usize) -> Arc<Vec<f64>> {
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(t)
            .or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut sums: Vec<f64> = (0..self.samples)
                    .map(|_| {
                        (0..t)
                            .map(|_| {
                                let r: f64 = rng.gen();
                                its_score_rank(r, rng.gen_range(0..self.vocab_size), self.vocab_size)
                            })
                            .sum()
                    })
                    .collect();
                sums.sort_by(f64::total_cmp);
                Arc::new(sums)
            })
            .clone()
    }
}

pub fn score_its(
    tokens: &[TokenId],
    key: &WatermarkKey,
    ngram_n: usize,
    null: &ItsNull,
    dedup: bool,
    perms: Option<&PermutationCache>,
) -> Result<ScoreSummary> {
    let n = null.vocab_size();
    check_vocab(tokens, n)?;
    let trace: Vec<StepScore> = scored_positions(tokens, key, ngram_n, dedup)?
        .into_iter()
        .map(|(pos, code)| {
            let rank = permutation(perms, &code, n).rank[tokens[pos].index()] as usize;
            let r = prf_r(&code);
            StepScore {
                position: pos,
                r,
                token: tokens[pos],
                score: its_score_rank(r, rank, n),
            }
        })
        .collect();
    let sorted = null.sorted_sums(trace.len());
    Ok(summarize(
        "its",
        trace,
        NullModel::Empirical {
            mean: null.step_mean(),
            sorted,
        },
    ))
}

pub fn detect_its(tokens: &[TokenId], key: &WatermarkKey, vocab_size: usize, ngram_n: usize, fpr: f64) -> Result<DetectionReport> {
    check_fpr(fpr)?;
    let null = ItsNull::new(vocab_size, ITS_NULL_SAMPLES, 0);
    Ok(score_its(tokens, key, ngram_n, &null, false, None)?.report(fpr))
}

/// Outcome of a Pearson chi-square goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Goodness of fit of `observed` counts to category probabilities `probs`.
/// Categories whose expected count is below `min_expected` are pooled; a pool
/// still below the limit joins the smallest retained category.
pub fn chi_square_gof(observed: &[u64], probs: &[f64], min_expected: f64) -> Result<ChiSquareTest> {
    if observed.len() != probs.len() || observed.is_empty() {
        return Err(Error::invalid("observed counts and probabilities must have the same non-zero length"));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no observations"));
    }
    let n = total as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut pool_obs, mut pool_exp) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        let e = p * n;
        if e >= min_expected {
            bins.push((o as f64, e));
        } else {
            pool_obs += o as f64;
            pool_exp += e;
        }
    }
    if pool_exp >= min_expected || bins.is_empty() {
        bins.push((pool_obs, pool_exp));
    } else if pool_obs > 0.0 || pool_exp > 0.0 {
        let smallest = bins
            .iter_mut()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        smallest.0 += pool_obs;
        smallest.1 += pool_exp;
    }
    if bins.iter().any(|&(o, e)| e == 0.0 && o > 0.0) {
        return Ok(ChiSquareTest {
            statistic: f64::INFINITY,
            df: bins.len().saturating_sub(1),
            p_value: 0.0,
        });
    }
    let statistic: f64 = bins.iter().filter(|b| b.1 > 0.0).map(|&(o, e)| (o - e) * (o - e) / e).sum();
    let df = bins.len().saturating_sub(1);
    let p_value = if df == 0 {
        1.0
    } else {
        let dist = statrs::distribution::ChiSquared::new(df as f64).expect("df >= 1");
        dist.sf(statistic)
    };
    Ok(ChiSquareTest { statistic, df, p_value })
}

fn empirical_threshold(sorted: &[f64], fpr: f64) -> f64 {
    let m = sorted.len();
    let k = ((1.0 - fpr) * m as f64).ceil() as usize;
    sorted[k.clamp(1, m) - 1]
}

fn empirical_pvalue(sorted: &[f64], score: f64) -> f64 {
    let at_least = sorted.len() - sorted.partition_point(|&v| v < score);
    (1 + at_least) as f64 / (1 + sorted.len()) as f64
}

/// Hoeffding upper bound on `Pr(S >= score)` for `t` Bernoulli(`null_rate`) steps.
pub fn hoeffding_pvalue(score: f64, t: usize, null_rate: f64) -> f64 {
    assert!(t >= 1, "hoeffding bound needs t >= 1");
    let t = t as f64;
    let excess = score / t - null_rate;
    if excess <= 0.0 {
        1.0
    } else {
        (-2.0 * t * excess * excess).exp()
    }
}

/// Score above which the Hoeffding bound is at most `fpr`.
pub fn hoeffding_threshold(t: usize, null_rate: f64, fpr: f64) -> f64 {
    let t = t as f64;
    t * null_rate + (t * (1.0 / fpr).ln() / 2.0).sqrt()
}

fn normal_upper_tail(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

fn normal_quantile_upper(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - p)
}

/// Upper tail `Pr(Bin(t, p) >= s)`.
pub fn exact_binomial_pvalue(s: u64, t: u64, p: f64) -> f64 {
    assert!(s <= t, "successes exceed trials");
    assert!((0.0..=1.0).contains(&p), "p must lie in [0, 1]");
    if s == 0 {
        return 1.0;
    }
    if p == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return 1.0;
    }
    let q = 1.0 - p;
    if s as f64 > t as f64 * p {
        // Terms decrease from k = s onward.
        let head = binom_pmf(s, t, p);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in s..t {
            term *= (t - k) as f64 / (k + 1) as f64 * (p / q);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        head * sum
    } else {
        // 1 - Pr(X <= s-1); terms decrease from k = s-1 downward.
        let head = binom_pmf(s - 1, t, p);
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = s - 1;
        while k > 0 {
            term *= k as f64 / (t - k + 1) as f64 * (q / p);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            k -= 1;
        }
        (1.0 - head * sum).clamp(0.0, 1.0)
    }
}

/// Binomial probability mass via the saddle-point form (Loader 2000), accurate
/// to near machine precision for large `t`.
pub fn binom_pmf(x: u64, n: u64, p: f64) -> f64 {
    let q = 1.0 - p;
    if x == 0 {
        return (n as f64 * q.ln()).exp();
    }
    if x == n {
        return (n as f64 * p.ln()).exp();
    }
    let (xf, nf) = (x as f64, n as f64);
    let lc = stirlerr(nf) - stirlerr(xf) - stirlerr(nf - xf) - bd0(xf, nf * p) - bd0(nf - xf, nf * q);
    let lf = (2.0 * std::f64::consts::PI).ln() + xf.ln() + (-xf / nf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// `ln(n!) - ln(sqrt(2 pi n) (n/e)^n)` for integer `n >= 1`.
#[allow(clippy::excessive_precision)]
fn stirlerr(n: f64) -> f64 {
    const TABLE: [f64; 16] = [
        0.0,
        0.081_061_466_795_327_258_219_670_26,
        0.041_340_695_955_409_294_093_822_08,
        0.027_677_925_684_998_339_148_789_29,
        0.020_790_672_103_765_093_111_522_77,
        0.016_644_691_189_821_192_163_194_87,
        0.013_876_128_823_070_747_998_745_73,
        0.011_896_709_945_891_770_095_055_72,
        0.010_411_265_261_972_096_497_478_57,
        0.009_255_462_182_712_732_917_728_637,
        0.008_330_563_433_362_871_256_469_319,
        0.007_573_675_487_951_840_794_972_024,
        0.006_942_840_107_209_529_865_664_153,
        0.006_408_994_188_004_207_068_439_631,
        0.005_951_370_112_758_847_735_624_416,
        0.005_554_733_551_962_801_371_038_69,
    ];
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        return TABLE[n as usize];
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x/np) + np - x`, evaluated stably near `x = np`.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        let mut j = 1;
        loop {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
            j += 1;
        }
    }
    x * (x / np).ln() + np - x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::tokens;

    fn key() -> WatermarkKey {
        WatermarkKey::new("detect").unwrap()
    }

    #[test]
    fn hoeffding_values() {
        let p = hoeffding_pvalue(80.0, 500, 0.05);
        assert!((p - (-12.1f64).exp()).abs() / p < 1e-12);
        assert_eq!(hoeffding_pvalue(25.0, 500, 0.05), 1.0);
        assert_eq!(hoeffding_pvalue(10.0, 500, 0.05), 1.0);
        let z = hoeffding_threshold(500, 0.05, 0.01);
        assert!((z - 58.9307).abs() < 1e-4, "{z}");
        assert!((hoeffding_pvalue(z, 500, 0.05) - 0.01).abs() < 1e-14);
        assert_eq!(hoeffding_threshold(500, 0.05, 1.0), 25.0);
    }

    #[test]
    fn binomial_small_cases() {
        assert_eq!(exact_binomial_pvalue(0, 10, 0.3), 1.0);
        assert!((exact_binomial_pvalue(2, 2, 0.5) - 0.25).abs() < 1e-15);
        assert!((exact_binomial_pvalue(1, 2, 0.5) - 0.75).abs() < 1e-15);
        assert!((binom_pmf(3, 10, 0.5) - 120.0 / 1024.0).abs() < 1e-15);
        // Large t stays finite and ordered.
        let a = exact_binomial_pvalue(5_200, 100_000, 0.05);
        let b = exact_binomial_pvalue(5_400, 100_000, 0.05);
        assert!(a > b && b > 0.0 && a < 1.0);
    }

    #[test]
    fn short_sequences_are_rejected() {
        let map = ClusterMap::new(2, vec![0, 1, 0, 1], vec![vec![0.0], vec![1.0]], 0).unwrap();
        let err = detect_aligned(&tokens(&[1, 2]), &key(), &map, 2, 0.01).unwrap_err();
        assert!(err.to_string().contains("at least 3"), "{err}");
        assert!(detect_aligned(&tokens(&[1, 2]), &key(), &map, 1, 0.0).is_err());
        assert!(detect_aligned(&tokens(&[1, 9]), &key(), &map, 1, 0.01).is_err());
    }

    #[test]
    fn all_zero_scores_give_p_one() {
        // Build the sequence greedily: at each position pick the token whose
        // cluster is not the bin of that position's r.
        let map = ClusterMap::new(2, vec![0, 1], vec![vec![0.0], vec![1.0]], 0).unwrap();
        let k = key();
        let mut seq = tokens(&[0]);
        for pos in 1..40 {
            let r = prf_r(&WatermarkCode::at(&k, &seq, pos, 1).unwrap());
            let bin = if r < 0.5 { 0 } else { 1 };
            seq.push(TokenId(1 - bin));
        }
        let report = detect_aligned(&seq, &k, &map, 1, 0.01).unwrap();
        assert_eq!(report.score, 0.0);
        assert_eq!(report.p_hoeffding, 1.0);
        assert_eq!(report.p_exact, 1.0);
        assert!(!report.verdict);
    }

    #[test]
    fn green_z_examples() {
        let s = ScoreSummary {
            strategy: "kgw".into(),
            score: 50.0,
            t: 100,
            null: NullModel::GreenZ(0.5),
            trace: Vec::new(),
        };
        assert_eq!(s.z_stat().unwrap(), 0.0);
        assert!((s.report(0.01).p_normal.unwrap() - 0.5).abs() < 1e-15);
        let all_green = ScoreSummary { score: 100.0, ..s };
        assert!((all_green.z_stat().unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn its_null_mean_and_pvalues() {
        let null = ItsNull::new(500, 2_000, 1);
        assert!((null.step_mean() - 2.0 / 3.0).abs() < 1e-5);
        let sums = null.sorted_sums(100);
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        assert!((mean / 100.0 - null.step_mean()).abs() < 0.005);
        assert!(empirical_pvalue(&sums, f64::INFINITY) > 0.0);
        assert_eq!(empirical_pvalue(&sums, f64::NEG_INFINITY), 1.0);
        let z = empirical_threshold(&sums, 0.01);
        let above = sums.iter().filter(|&&v| v > z).count();
        assert!(above as f64 <= 0.01 * sums.len() as f64);
    }

    #[test]
    fn report_json_fields() {
        let map = ClusterMap::new(2, vec![0, 1, 0, 1], vec![vec![0.0], vec![1.0]], 0).unwrap();
        let rep = detect_aligned(&tokens(&[0, 1, 2, 3, 0, 1]), &key(), &map, 1, 0.01).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for f in ["score", "t", "threshold", "p_hoeffding", "p_exact", "verdict", "strategy", "fpr"] {
            assert!(v.get(f).is_some(), "missing {f}");
        }
        assert!(v.get("trace").is_none());
        assert_eq!(rep.t, 5);
    }

    #[test]
    fn dedup_skips_repeated_codes() {
        let map = ClusterMap::new(2, vec![0, 1], vec![vec![0.0], vec![1.0]], 0).unwrap();
        let seq = tokens(&[0, 1, 0, 1, 0, 1]);
        assert_eq!(score_aligned(&seq, &key(), &map, 1, false).unwrap().t, 5);
        assert_eq!(score_aligned(&seq, &key(), &map, 1, true).unwrap().t, 2);
    }

    #[test]
    fn chi_square_pooling() {
        let t = chi_square_gof(&[50, 50], &[0.5, 0.5], 5.0).unwrap();
        assert_eq!((t.statistic, t.df, t.p_value), (0.0, 1, 1.0));
        let t = chi_square_gof(&[90, 10], &[0.5, 0.5], 5.0).unwrap();
        assert!((t.statistic - 64.0).abs() < 1e-12 && t.p_value < 1e-10);
        // Two rare categories are pooled (expected 2 + 2 < 5) into the smallest kept bin.
        let t = chi_square_gof(&[48, 48, 2, 2], &[0.48, 0.48, 0.02, 0.02], 5.0).unwrap();
        assert_eq!(t.df, 1);
        let t = chi_square_gof(&[0, 10], &[0.0, 1.0], 5.0).unwrap();
        assert_eq!(t.df, 0);
        assert_eq!(chi_square_gof(&[1, 9], &[0.0, 1.0], 0.0).unwrap().p_value, 0.0);
        assert!(chi_square_gof(&[1], &[0.5, 0.5], 5.0).is_err());
    }
}
