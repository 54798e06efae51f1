//! Watermarked autoregressive generation with watermark-code history.

use std::borrow::Cow;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterMap;
use crate::error::{Error, Result};
use crate::prf::{code_fingerprint, prf_r, Permutation, PermutationCache};
use crate::reweight::{
    aligned_sample, cluster_probs, dipmark_reweight_permuted, its_sample_permuted, GreenList, ReweightConfig,
    SegmentTable,
};
use crate::token::{CodeHistory, ProbVector, TokenId, WatermarkCode, WatermarkKey};

/// Source of next-token distributions. Deterministic in the context.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn next_dist(&self, context: &[TokenId]) -> Cow<'_, ProbVector>;
}

/// The same distribution at every step.
#[derive(Debug, Clone)]
pub struct ConstantModel(pub ProbVector);

impl LanguageModel for ConstantModel {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }

    fn next_dist(&self, _context: &[TokenId]) -> Cow<'_, ProbVector> {
        Cow::Borrowed(&self.0)
    }
}

/// A reweight strategy bound to the state it needs at sampling time.
#[derive(Debug, Clone)]
pub enum Scheme {
    AlignedIs(Arc<ClusterMap>),
    Its(Arc<PermutationCache>),
    Kgw { delta: f64, gamma: f64, perms: Arc<PermutationCache> },
    Unigram { green: Arc<GreenList>, delta: f64 },
    Dipmark { alpha: f64, perms: Arc<PermutationCache> },
}

fn perm_cache(vocab_size: usize) -> Arc<PermutationCache> {
    Arc::new(PermutationCache::new(vocab_size, PermutationCache::DEFAULT_CAPACITY))
}

impl Scheme {
    /// `map` is required for `aligned_is` and must have the configured `h`.
    pub fn from_config(
        cfg: &ReweightConfig,
        key: &WatermarkKey,
        map: Option<Arc<ClusterMap>>,
        vocab_size: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::invalid("vocabulary size must be at least 1"));
        }
        Ok(match *cfg {
            ReweightConfig::AlignedIs { h } => {
                let map = map.ok_or_else(|| Error::invalid("aligned_is needs a cluster map"))?;
                if map.h() != h {
                    return Err(Error::invalid(format!("configured h = {h} but cluster map has h = {}", map.h())));
                }
                if map.n_tokens() != vocab_size {
                    return Err(Error::invalid("cluster map does not cover the model vocabulary"));
                }
                Scheme::AlignedIs(map)
            }
            ReweightConfig::Its {} => Scheme::its(vocab_size),
            ReweightConfig::Kgw { delta, gamma } => Scheme::Kgw {
                delta,
                gamma,
                perms: perm_cache(vocab_size),
            },
            ReweightConfig::Unigram { delta, gamma } => Scheme::Unigram {
                green: Arc::new(GreenList::new(&WatermarkCode::global(key), vocab_size, gamma)),
                delta,
            },
            ReweightConfig::Dipmark { alpha } => Scheme::Dipmark {
                alpha,
                perms: perm_cache(vocab_size),
            },
            ReweightConfig::GammaReweight {} => Scheme::Dipmark {
                alpha: 0.5,
                perms: perm_cache(vocab_size),
            },
        })
    }

    pub fn its(vocab_size: usize) -> Self {
        Scheme::Its(perm_cache(vocab_size))
    }

    /// Draws one watermarked token for `code`. `rng` supplies only the
    /// randomness that is not derived from the code (within-cluster choice,
    /// sampling from a reweighted distribution).
    pub fn sample(&self, dist: &ProbVector, code: &WatermarkCode<'_>, rng: &mut ChaCha8Rng) -> Result<TokenId> {
        match self {
            Scheme::AlignedIs(map) => {
                let table = SegmentTable::build(&cluster_probs(dist, map)?)?;
                aligned_sample(&table, dist, map, prf_r(code), rng)
            }
            Scheme::Its(perms) => {
                let perm = permutation(perms, code, dist)?;
                Ok(its_sample_permuted(dist, &perm.order, prf_r(code)))
            }
            Scheme::Kgw { delta, gamma, perms } => {
                let green = GreenList::from_permutation(&permutation(perms, code, dist)?.order, *gamma);
                Ok(green.boost(dist, *delta)?.sample(rng))
            }
            Scheme::Unigram { green, delta } => Ok(green.boost(dist, *delta)?.sample(rng)),
            Scheme::Dipmark { alpha, perms } => {
                let perm = permutation(perms, code, dist)?;
                Ok(dipmark_reweight_permuted(dist, &perm.order, *alpha)?.sample(rng))
            }
        }
    }
}

fn permutation(perms: &PermutationCache, code: &WatermarkCode<'_>, dist: &ProbVector) -> Result<Arc<Permutation>> {
    if perms.n() != dist.len() {
        return Err(Error::invalid(format!(
            "scheme built for {} tokens but the distribution has {}",
            perms.n(),
            dist.len()
        )));
    }
    Ok(perms.get(code))
}

/// How one generated position was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Sampled with the watermark; carries the code fingerprint.
    Watermarked(u64),
    /// The code was already in the history; sampled from the model.
    RepeatedCode(u64),
    /// Fewer than `n` tokens of context; sampled from the model.
    ShortContext,
}

/// State of one watermarked generation run.
#[derive(Debug, Clone)]
pub struct GenerationSession {
    key: WatermarkKey,
    ngram_n: usize,
    scheme: Scheme,
    history: CodeHistory,
    use_history: bool,
    persistent_history: bool,
    rng: ChaCha8Rng,
    steps: Vec<StepKind>,
}

impl GenerationSession {
    pub fn new(key: WatermarkKey, ngram_n: usize, scheme: Scheme, rng_seed: u64) -> Result<Self> {
        if ngram_n == 0 {
            return Err(Error::invalid("n-gram length must be at least 1"));
        }
        Ok(GenerationSession {
            key,
            ngram_n,
            scheme,
            history: CodeHistory::new(),
            use_history: true,
            persistent_history: false,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            steps: Vec::new(),
        })
    }

    /// Disables the repeated-code check: every step with full context is watermarked.
    pub fn without_history(mut self) -> Self {
        self.use_history = false;
        self
    }

    /// Keeps the history across `generate` calls instead of starting each call empty.
    pub fn with_persistent_history(mut self) -> Self {
        self.persistent_history = true;
        self
    }

    pub fn history(&self) -> &CodeHistory {
        &self.history
    }

    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    pub fn ngram_n(&self) -> usize {
        self.ngram_n
    }

    /// Per-position record of the most recent `generate` call.
    pub fn steps(&self) -> &[StepKind] {
        &self.steps
    }
}

/// Generates `t` tokens after `prompt`, watermarking each step whose code is new.
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    t: usize,
    session: &mut GenerationSession,
) -> Result<Vec<TokenId>> {
    if t < 1 {
        return Err(Error::invalid("generation length must be at least 1"));
    }
    if !session.persistent_history {
        session.history.clear();
    }
    session.steps.clear();
    let mut seq = Vec::with_capacity(prompt.len() + t);
    seq.extend_from_slice(prompt);
    for _ in 0..t {
        let dist = model.next_dist(&seq);
        let pos = seq.len();
        let (token, kind) = match WatermarkCode::at(&session.key, &seq, pos, session.ngram_n) {
            None => (dist.sample(&mut session.rng), StepKind::ShortContext),
            Some(code) => {
                let fp = code_fingerprint(&code);
                if session.use_history && !session.history.insert(fp) {
                    (dist.sample(&mut session.rng), StepKind::RepeatedCode(fp))
                } else {
                    (session.scheme.sample(&dist, &code, &mut session.rng)?, StepKind::Watermarked(fp))
                }
            }
        };
        session.steps.push(kind);
        seq.push(token);
    }
    Ok(seq.split_off(prompt.len()))
}

/// Plain ancestral sampling from the model.
pub fn generate_unwatermarked<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    t: usize,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if t < 1 {
        return Err(Error::invalid("generation length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = Vec::with_capacity(prompt.len() + t);
    seq.extend_from_slice(prompt);
    for _ in 0..t {
        let tok = model.next_dist(&seq).sample(&mut rng);
        seq.push(tok);
    }
    Ok(seq.split_off(prompt.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::tokens;

    fn key() -> WatermarkKey {
        WatermarkKey::new("gen-test").unwrap()
    }

    /// Next token is always `last + 1 mod N`, so every context is distinct until wrap-around.
    struct Counter(usize);

    impl LanguageModel for Counter {
        fn vocab_size(&self) -> usize {
            self.0
        }

        fn next_dist(&self, context: &[TokenId]) -> Cow<'_, ProbVector> {
            let next = context.last().map_or(0, |t| (t.index() + 1) % self.0);
            Cow::Owned(ProbVector::point_mass(self.0, TokenId(next as u32)).unwrap())
        }
    }

    #[test]
    fn rejects_zero_length() {
        let m = ConstantModel(ProbVector::uniform(4).unwrap());
        let mut s = GenerationSession::new(key(), 1, Scheme::its(4), 0).unwrap();
        assert!(generate(&m, &[], 0, &mut s).is_err());
        assert!(generate_unwatermarked(&m, &[], 0, 0).is_err());
        assert!(GenerationSession::new(key(), 0, Scheme::its(4), 0).is_err());
    }

    #[test]
    fn deterministic_model_repeats_its_token() {
        let m = ConstantModel(ProbVector::point_mass(5, TokenId(3)).unwrap());
        let out = generate_unwatermarked(&m, &[], 7, 1).unwrap();
        assert_eq!(out, tokens(&[3; 7]));
        let uni = ConstantModel(ProbVector::uniform(50).unwrap());
        assert_eq!(
            generate_unwatermarked(&uni, &tokens(&[1]), 40, 9).unwrap(),
            generate_unwatermarked(&uni, &tokens(&[1]), 40, 9).unwrap()
        );
    }

    #[test]
    fn history_semantics() {
        // Counter model over 4 tokens cycles 0,1,2,3,0,...; with n = 1 only the
        // first four full-context steps have fresh codes.
        let m = Counter(4);
        let mut s = GenerationSession::new(key(), 1, Scheme::its(4), 3).unwrap();
        let out = generate(&m, &[], 10, &mut s).unwrap();
        assert_eq!(out, tokens(&[0, 1, 2, 3, 0, 1, 2, 3, 0, 1]));
        let kinds = s.steps();
        assert_eq!(kinds[0], StepKind::ShortContext);
        assert!(kinds[1..5].iter().all(|k| matches!(k, StepKind::Watermarked(_))));
        assert!(kinds[5..].iter().all(|k| matches!(k, StepKind::RepeatedCode(_))));
        assert_eq!(s.history().len(), 4);

        // A fresh call starts with an empty history again.
        generate(&m, &[], 3, &mut s).unwrap();
        assert_eq!(s.history().len(), 2);
    }

    #[test]
    fn persistent_history_carries_over() {
        let m = Counter(4);
        let mut s = GenerationSession::new(key(), 1, Scheme::its(4), 3)
            .unwrap()
            .with_persistent_history();
        generate(&m, &[], 5, &mut s).unwrap();
        generate(&m, &[], 5, &mut s).unwrap();
        assert!(s.steps().iter().all(|k| !matches!(k, StepKind::Watermarked(_))));
    }

    #[test]
    fn without_history_watermarks_every_full_context_step() {
        let m = Counter(3);
        let mut s = GenerationSession::new(key(), 1, Scheme::its(3), 0).unwrap().without_history();
        generate(&m, &tokens(&[2]), 9, &mut s).unwrap();
        assert!(s.steps().iter().all(|k| matches!(k, StepKind::Watermarked(_))));
    }

    #[test]
    fn scheme_requires_matching_map() {
        let k = key();
        let cfg = ReweightConfig::AlignedIs { h: 2 };
        assert!(Scheme::from_config(&cfg, &k, None, 4).is_err());
        let map = Arc::new(ClusterMap::new(3, vec![0, 1, 2, 2], vec![vec![0.0]; 3], 0).unwrap());
        assert!(Scheme::from_config(&cfg, &k, Some(map.clone()), 4).is_err());
        let cfg = ReweightConfig::AlignedIs { h: 3 };
        assert!(Scheme::from_config(&cfg, &k, Some(map.clone()), 5).is_err());
        assert!(Scheme::from_config(&cfg, &k, Some(map), 4).is_ok());
    }

    #[test]
    fn scheme_rejects_vocabulary_mismatch() {
        let m = ConstantModel(ProbVector::uniform(6).unwrap());
        let mut s = GenerationSession::new(key(), 1, Scheme::its(5), 0).unwrap();
        assert!(generate(&m, &tokens(&[0]), 3, &mut s).is_err());
    }
}
