//! Shared trial machinery: world construction, seeds, detectors, attacks.

use std::sync::Arc;

use clusterwm_core::clustering::{kmeans_fit, ClusterMap, EmbeddingMatrix};
use clusterwm_core::detect::{score_aligned, score_dipmark, score_green, score_its, ItsNull, ScoreSummary, ITS_NULL_SAMPLES};
use clusterwm_core::generate::{generate, generate_unwatermarked, GenerationSession, Scheme};
use clusterwm_core::prf::PermutationCache;
use clusterwm_core::reweight::ReweightConfig;
use clusterwm_core::simenv::{
    attack_crop, attack_insert_delete, attack_substitute, synthetic_embeddings, Channel, CHANNEL_PRESETS, ChannelConfig,
    SyntheticModel,
};
use clusterwm_core::{TokenId, WatermarkKey};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ClusterSection, ExperimentConfig, ModelSource};
use crate::error::{HarnessError, HarnessResult};

/// Seed for one (label, index) cell, independent of scheduling order.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_be_bytes());
    h.update((label.len() as u64).to_be_bytes());
    h.update(label.as_bytes());
    h.update(index.to_be_bytes());
    u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Embeddings plus, for synthetic models, the generating partition.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub matrix: EmbeddingMatrix,
    pub true_labels: Option<Vec<u32>>,
}

impl Embeddings {
    /// Loads or synthesizes embeddings without building a model.
    pub fn load(source: &ModelSource) -> HarnessResult<Self> {
        match source {
            ModelSource::Synthetic(cfg) => {
                let (matrix, labels) = synthetic_embeddings(cfg)?;
                Ok(Embeddings {
                    matrix,
                    true_labels: Some(labels),
                })
            }
            ModelSource::EmbeddingFile { path, .. } => Ok(Embeddings {
                matrix: EmbeddingMatrix::load(path)?,
                true_labels: None,
            }),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.n_tokens()
    }

    pub fn fit(&self, cluster: &ClusterSection, h: usize) -> HarnessResult<ClusterMap> {
        let map = kmeans_fit(&self.matrix, h, cluster.seed, cluster.max_iters, cluster.tol)?;
        Ok(if cluster.relabel { map.relabel_separated() } else { map })
    }

    /// The partition the retokenization channel perturbs around: the generating
    /// mixture when known, otherwise the fitted map.
    pub fn channel_map(&self, fitted: &ClusterMap) -> HarnessResult<ClusterMap> {
        match &self.true_labels {
            Some(labels) => Ok(ClusterMap::from_labels(labels.clone(), &self.matrix)?),
            None => Ok(fitted.clone()),
        }
    }
}

pub fn build_model(source: &ModelSource, vocab_size: usize) -> HarnessResult<SyntheticModel> {
    Ok(match source {
        ModelSource::Synthetic(cfg) => SyntheticModel::new(cfg)?,
        ModelSource::EmbeddingFile {
            dirichlet_beta, seed, ..
        } => SyntheticModel::dirichlet(vocab_size, *dirichlet_beta, *seed, 1)?,
    })
}

/// Everything an experiment needs, built once.
pub struct World {
    pub cfg: ExperimentConfig,
    pub key: WatermarkKey,
    pub embeddings: Embeddings,
    pub model: SyntheticModel,
    pub map: Arc<ClusterMap>,
    pub channel_map: ClusterMap,
    detectors: Detectors,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> HarnessResult<Self> {
        let key = cfg.key()?;
        let embeddings = Embeddings::load(&cfg.model)?;
        let vocab = embeddings.vocab_size();
        let model = build_model(&cfg.model, vocab)?;
        let map = embeddings.fit(&cfg.cluster, cfg.cluster.h)?;
        let channel_map = embeddings.channel_map(&map)?;
        Ok(World {
            cfg: cfg.clone(),
            detectors: Detectors::new(cfg, key.clone(), vocab),
            key,
            embeddings,
            model,
            map: Arc::new(map),
            channel_map,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.vocab_size()
    }

    pub fn ngram_n(&self) -> usize {
        self.cfg.watermark.ngram_n
    }

    /// Sequence length including the `n`-token prompt, so that `seq_len` steps are scored.
    pub fn total_len(&self) -> usize {
        self.cfg.seq_len + self.ngram_n()
    }

    fn prompt(&self, seed: u64) -> Vec<TokenId> {
        let vocab = self.vocab_size() as u64;
        (0..self.ngram_n() as u64)
            .map(|j| TokenId((derive_seed(seed, "prompt", j) % vocab) as u32))
            .collect()
    }

    /// Sampling scheme for `method`; clones share its permutation cache.
    pub fn scheme(&self, method: &ReweightConfig, map: &Arc<ClusterMap>) -> HarnessResult<Scheme> {
        Ok(Scheme::from_config(method, &self.key, Some(map.clone()), self.vocab_size())?)
    }

    /// Watermarked sequence (prompt included) for trial `index`.
    pub fn watermarked(&self, method: &ReweightConfig, scheme: &Scheme, index: u64) -> HarnessResult<Vec<TokenId>> {
        let seed = derive_seed(self.cfg.seed, &format!("wm/{}/{}", method.name(), method.params()), index);
        let mut session = GenerationSession::new(self.key.clone(), self.ngram_n(), scheme.clone(), seed)?;
        let mut seq = self.prompt(seed);
        let body = generate(&self.model, &seq, self.cfg.seq_len, &mut session)?;
        seq.extend(body);
        Ok(seq)
    }

    /// Unwatermarked sequence (prompt included) for trial `index`.
    pub fn unwatermarked(&self, index: u64) -> HarnessResult<Vec<TokenId>> {
        let seed = derive_seed(self.cfg.seed, "null", index);
        let mut seq = self.prompt(seed);
        let body = generate_unwatermarked(&self.model, &seq, self.cfg.seq_len, seed)?;
        seq.extend(body);
        Ok(seq)
    }

    pub fn null_corpus(&self) -> HarnessResult<Vec<Vec<TokenId>>> {
        (0..self.cfg.trials as u64)
            .into_par_iter()
            .map(|i| self.unwatermarked(i))
            .collect()
    }

    pub fn detector(&self, method: &ReweightConfig, map: &Arc<ClusterMap>) -> Detector {
        self.detectors.for_method(method, map)
    }

    pub fn channel(&self, cfg: ChannelConfig) -> HarnessResult<Channel> {
        Ok(Channel::new(&self.channel_map, &self.embeddings.matrix, cfg)?)
    }
}

/// Builds detectors from the key and vocabulary alone; shares the ITS null and permutation cache.
#[derive(Debug, Clone)]
pub struct Detectors {
    key: WatermarkKey,
    vocab_size: usize,
    ngram_n: usize,
    alpha_detect: f64,
    dedup: bool,
    its_null: Arc<ItsNull>,
    perms: Arc<PermutationCache>,
}

impl Detectors {
    pub fn new(cfg: &ExperimentConfig, key: WatermarkKey, vocab_size: usize) -> Self {
        Detectors {
            key,
            vocab_size,
            ngram_n: cfg.watermark.ngram_n,
            alpha_detect: cfg.watermark.dipmark_alpha_detect,
            dedup: cfg.watermark.dedup_on_detect,
            its_null: Arc::new(ItsNull::new(vocab_size, ITS_NULL_SAMPLES, derive_seed(cfg.seed, "its-null", 0))),
            perms: Arc::new(PermutationCache::new(vocab_size, PermutationCache::DEFAULT_CAPACITY)),
        }
    }

    pub fn for_method(&self, method: &ReweightConfig, map: &Arc<ClusterMap>) -> Detector {
        let kind = match *method {
            ReweightConfig::AlignedIs { .. } => DetectorKind::Aligned(map.clone()),
            ReweightConfig::Its {} => DetectorKind::Its(self.its_null.clone()),
            ReweightConfig::Kgw { gamma, .. } => DetectorKind::Green {
                gamma,
                context_free: false,
            },
            ReweightConfig::Unigram { gamma, .. } => DetectorKind::Green {
                gamma,
                context_free: true,
            },
            ReweightConfig::Dipmark { .. } => DetectorKind::Dipmark {
                alpha_detect: self.alpha_detect,
            },
            ReweightConfig::GammaReweight {} => DetectorKind::Dipmark { alpha_detect: 0.5 },
        };
        Detector {
            kind,
            key: self.key.clone(),
            vocab_size: self.vocab_size,
            ngram_n: self.ngram_n,
            dedup: self.dedup,
            perms: self.perms.clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum DetectorKind {
    Aligned(Arc<ClusterMap>),
    Green { gamma: f64, context_free: bool },
    Dipmark { alpha_detect: f64 },
    Its(Arc<ItsNull>),
}

/// A configured detector; consults only tokens, the key and (for aligned) the cluster map.
#[derive(Debug, Clone)]
pub struct Detector {
    kind: DetectorKind,
    key: WatermarkKey,
    vocab_size: usize,
    ngram_n: usize,
    dedup: bool,
    perms: Arc<PermutationCache>,
}

impl Detector {
    pub fn score(&self, tokens: &[TokenId]) -> HarnessResult<ScoreSummary> {
        let (key, n, dedup, perms) = (&self.key, self.ngram_n, self.dedup, Some(&*self.perms));
        Ok(match &self.kind {
            DetectorKind::Aligned(map) => score_aligned(tokens, key, map, n, dedup)?,
            DetectorKind::Green { gamma, context_free } => {
                score_green(tokens, key, self.vocab_size, *gamma, n, *context_free, dedup, perms)?
            }
            DetectorKind::Dipmark { alpha_detect } => {
                score_dipmark(tokens, key, self.vocab_size, *alpha_detect, n, dedup, perms)?
            }
            DetectorKind::Its(null) => score_its(tokens, key, n, null, dedup, perms)?,
        })
    }
}

/// Post-generation transformation applied before detection.
#[derive(Debug, Clone, PartialEq)]
pub enum Attack {
    Identity,
    Channel(ChannelConfig),
    Substitute(f64),
    /// Keep this many tokens at a per-trial random offset.
    Crop(usize),
    InsertDelete(f64),
}

impl Attack {
    pub fn kind(&self) -> &'static str {
        match self {
            Attack::Identity => "identity",
            Attack::Channel(_) => "channel",
            Attack::Substitute(_) => "substitute",
            Attack::Crop(_) => "crop",
            Attack::InsertDelete(_) => "insert_delete",
        }
    }

    pub fn level(&self) -> String {
        match self {
            Attack::Identity => String::new(),
            Attack::Channel(c) => CHANNEL_PRESETS
                .iter()
                .find(|(_, tok, clu)| {
                    ChannelConfig::from_rates(*tok, *clu, c.seed)
                        .is_ok_and(|p| p.p_tok == c.p_tok && p.q_same == c.q_same)
                })
                .map_or_else(|| format!("p_tok={};q_same={}", c.p_tok, c.q_same), |(name, ..)| name.to_string()),
            Attack::Substitute(r) | Attack::InsertDelete(r) => r.to_string(),
            Attack::Crop(k) => k.to_string(),
        }
    }
}

/// Applies attacks with per-trial seeds; the channel object is prepared once.
pub struct AttackRunner {
    attack: Attack,
    channel: Option<Channel>,
    vocab_size: usize,
    seed: u64,
}

impl AttackRunner {
    pub fn new(world: &World, attack: Attack, label: &str) -> HarnessResult<Self> {
        let channel = match &attack {
            Attack::Channel(c) => Some(world.channel(*c)?),
            _ => None,
        };
        Ok(AttackRunner {
            attack,
            channel,
            vocab_size: world.vocab_size(),
            seed: derive_seed(world.cfg.seed, label, 0),
        })
    }

    pub fn apply(&self, tokens: &[TokenId], index: u64) -> HarnessResult<Vec<TokenId>> {
        let seed = derive_seed(self.seed, self.attack.kind(), index);
        Ok(match &self.attack {
            Attack::Identity => tokens.to_vec(),
            Attack::Channel(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.channel.as_ref().expect("prepared").apply(tokens, &mut rng)
            }
            Attack::Substitute(rate) => attack_substitute(tokens, *rate, self.vocab_size, seed)?,
            Attack::Crop(keep) => {
                let keep = (*keep).min(tokens.len());
                let slack = tokens.len() - keep;
                let front = if slack == 0 { 0 } else { (seed % (slack as u64 + 1)) as usize };
                attack_crop(tokens, front, slack - front)?
            }
            Attack::InsertDelete(rate) => attack_insert_delete(tokens, *rate, *rate, self.vocab_size, seed)?,
        })
    }
}

/// Detection outcome of one sequence across the FPR grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub score: f64,
    pub t: usize,
    pub null_rate: f64,
    pub flagged: Vec<bool>,
    pub p_exact: f64,
}

impl Outcome {
    pub fn from_summary(s: &ScoreSummary, fpr_grid: &[f64]) -> Self {
        Outcome {
            score: s.score,
            t: s.t,
            null_rate: s.null_rate(),
            flagged: fpr_grid.iter().map(|&f| s.is_flagged(f)).collect(),
            p_exact: s.p_exact(),
        }
    }
}

/// Scores a batch of sequences in parallel; sequences too short to score count as not flagged.
pub fn detect_all(
    detector: &Detector,
    seqs: &[Vec<TokenId>],
    fpr_grid: &[f64],
) -> HarnessResult<Vec<Outcome>> {
    seqs.par_iter()
        .map(|s| match detector.score(s) {
            Ok(summary) => Ok(Outcome::from_summary(&summary, fpr_grid)),
            Err(HarnessError::Core(clusterwm_core::Error::InvalidArgument(m))) if m.contains("needs at least") => {
                Ok(Outcome {
                    score: 0.0,
                    t: 0,
                    null_rate: f64::NAN,
                    flagged: vec![false; fpr_grid.len()],
                    p_exact: 1.0,
                })
            }
            Err(e) => Err(e),
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}
