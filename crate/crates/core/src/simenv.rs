//! Small-scale stand-ins for an audio-token stack.
//!
//! * [`SyntheticModel`]: vocabulary with Gaussian-mixture embeddings and a
//!   context-keyed Dirichlet next-token distribution.
//! * [`Channel`]: decode/re-encode emulation. Each position is independently
//!   replaced, usually by an embedding neighbour in the same cluster,
//!   otherwise by a token from another cluster. Presets match measured
//!   retokenization mismatch rates of a real speech model.
//! * token-level attacks: substitution, cropping, insertion/deletion.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{ClusterMap, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::generate::LanguageModel;
use crate::token::{ProbVector, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub true_clusters: usize,
    /// Distance between mixture centres in units of the component standard deviation.
    pub separation: f64,
    pub dirichlet_beta: f64,
    pub seed: u64,
    /// Number of trailing tokens the next-token distribution depends on.
    pub context_window: usize,
    /// Fraction of contexts whose distribution uses `peaked_beta` instead of
    /// `dirichlet_beta` (nearly predictable steps mixed with open ones).
    pub peaked_fraction: f64,
    pub peaked_beta: f64,
}

impl Default for SyntheticModelConfig {
    fn default() -> Self {
        SyntheticModelConfig {
            vocab_size: 500,
            embed_dim: 32,
            true_clusters: 20,
            separation: 20.0,
            dirichlet_beta: 0.1,
            seed: 2024,
            context_window: 1,
            peaked_fraction: 0.7,
            peaked_beta: 0.005,
        }
    }
}

impl SyntheticModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.true_clusters == 0 || self.vocab_size < self.true_clusters {
            return Err(Error::invalid(format!(
                "need vocab_size >= true_clusters >= 1, got {} and {}",
                self.vocab_size, self.true_clusters
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::invalid("vocabularies above 2^32 tokens are unsupported"));
        }
        if self.embed_dim < self.true_clusters {
            return Err(Error::invalid(format!(
                "embed_dim ({}) must be at least true_clusters ({}) to place equidistant centres",
                self.embed_dim, self.true_clusters
            )));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("separation must be positive"));
        }
        if !(self.dirichlet_beta > 0.0 && self.dirichlet_beta.is_finite()) {
            return Err(Error::invalid("dirichlet_beta must be positive"));
        }
        if self.context_window == 0 {
            return Err(Error::invalid("context_window must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.peaked_fraction) {
            return Err(Error::invalid("peaked_fraction must lie in [0, 1]"));
        }
        if !(self.peaked_beta > 0.0 && self.peaked_beta.is_finite()) {
            return Err(Error::invalid("peaked_beta must be positive"));
        }
        Ok(())
    }
}

/// Next-token distributions drawn from `Dirichlet(beta, ..., beta)`, one per
/// context, seeded by SHA-256 of the model seed and the context window.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    vocab_size: usize,
    beta: f64,
    /// `(fraction, beta)` of the peaked regime.
    peaked: Option<(f64, f64)>,
    seed: u64,
    window: usize,
    /// Precomputed distributions when `window == 1`: index 0 is the empty
    /// context, index `t + 1` the context ending in token `t`.
    table: Option<Vec<ProbVector>>,
}

impl SyntheticModel {
    pub fn new(cfg: &SyntheticModelConfig) -> Result<Self> {
        cfg.validate()?;
        let peaked = (cfg.peaked_fraction > 0.0).then_some((cfg.peaked_fraction, cfg.peaked_beta));
        Self::build(cfg.vocab_size, cfg.dirichlet_beta, peaked, cfg.seed, cfg.context_window)
    }

    /// A model over an arbitrary vocabulary, without embeddings.
    pub fn dirichlet(vocab_size: usize, beta: f64, seed: u64, window: usize) -> Result<Self> {
        Self::build(vocab_size, beta, None, seed, window)
    }

    fn build(vocab_size: usize, beta: f64, peaked: Option<(f64, f64)>, seed: u64, window: usize) -> Result<Self> {
        if vocab_size == 0 || vocab_size > u32::MAX as usize {
            return Err(Error::invalid(format!("unsupported vocabulary size {vocab_size}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid("dirichlet_beta must be positive"));
        }
        if window == 0 {
            return Err(Error::invalid("context_window must be at least 1"));
        }
        let mut model = SyntheticModel {
            vocab_size,
            beta,
            peaked,
            seed,
            window,
            table: None,
        };
        if window == 1 {
            let mut table = Vec::with_capacity(vocab_size + 1);
            table.push(model.draw(&[]));
            for t in 0..vocab_size as u32 {
                table.push(model.draw(&[TokenId(t)]));
            }
            model.table = Some(table);
        }
        Ok(model)
    }

    fn draw(&self, window: &[TokenId]) -> ProbVector {
        let mut h = Sha256::new();
        h.update(b"synthetic-model");
        h.update(self.seed.to_be_bytes());
        h.update((window.len() as u32).to_be_bytes());
        for t in window {
            h.update(t.0.to_be_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let beta = match self.peaked {
            Some((fraction, peaked_beta)) if rng.gen::<f64>() < fraction => peaked_beta,
            _ => self.beta,
        };
        let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
        let weights: Vec<f64> = (0..self.vocab_size).map(|_| gamma.sample(&mut rng)).collect();
        // All draws can underflow for tiny beta; fall back to a point mass on the largest.
        ProbVector::normalized(weights.clone()).unwrap_or_else(|_| {
            let top = weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i);
            ProbVector::point_mass(self.vocab_size, TokenId(top as u32)).unwrap()
        })
    }
}

impl LanguageModel for SyntheticModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &[TokenId]) -> Cow<'_, ProbVector> {
        let start = context.len().saturating_sub(self.window);
        let window = &context[start..];
        match &self.table {
            Some(table) => Cow::Borrowed(&table[window.first().map_or(0, |t| t.index() + 1)]),
            None => Cow::Owned(self.draw(window)),
        }
    }
}

/// A synthetic model with its embeddings and the mixture component of every token.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub model: SyntheticModel,
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<u32>,
}

impl SyntheticWorld {
    /// The generating mixture partition as a cluster map.
    pub fn true_map(&self) -> ClusterMap {
        ClusterMap::from_labels(self.labels.clone(), &self.embeddings).expect("every component has members")
    }
}

/// Embeddings: token `i` belongs to component `i mod K`; component `j` is
/// centred at `(separation / sqrt 2) e_j`, so centres are pairwise
/// `separation` apart, with unit-variance isotropic noise.
/// Returns the embeddings and the component label of every token.
pub fn synthetic_embeddings(cfg: &SyntheticModelConfig) -> Result<(EmbeddingMatrix, Vec<u32>)> {
    cfg.validate()?;
    let (n, d, k) = (cfg.vocab_size, cfg.embed_dim, cfg.true_clusters);
    let scale = cfg.separation / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let comp = i % k;
        labels.push(comp as u32);
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(if j == comp { scale } else { 0.0 } + noise);
        }
    }
    Ok((EmbeddingMatrix::new(n, d, data)?, labels))
}

pub fn build_synthetic_model(cfg: &SyntheticModelConfig) -> Result<SyntheticWorld> {
    let (embeddings, labels) = synthetic_embeddings(cfg)?;
    Ok(SyntheticWorld {
        model: SyntheticModel::new(cfg)?,
        embeddings,
        labels,
    })
}

fn default_k_neighbors() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Probability that a position is replaced.
    pub p_tok: f64,
    /// Probability that a replacement stays inside the token's cluster.
    pub q_same: f64,
    pub seed: u64,
    #[serde(default = "default_k_neighbors")]
    pub k_neighbors: usize,
}

/// Measured retokenization mismatch before and after clustering, per dataset.
pub const CHANNEL_PRESETS: [(&str, f64, f64); 6] = [
    ("mmw_book_report", 0.3749, 0.2117),
    ("mmw_story", 0.3652, 0.2174),
    ("mmw_fake_news", 0.4295, 0.2300),
    ("dolly_cw", 0.3634, 0.2134),
    ("longform_qa", 0.3757, 0.2109),
    ("finance_qa", 0.3587, 0.2133),
];

impl ChannelConfig {
    /// Channel whose expected token and cluster mismatch rates are the given pair.
    pub fn from_rates(token_rate: f64, cluster_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&token_rate) || !(0.0..=token_rate).contains(&cluster_rate) {
            return Err(Error::invalid(format!(
                "need 0 <= cluster_rate <= token_rate <= 1, got {cluster_rate} and {token_rate}"
            )));
        }
        let q_same = if token_rate > 0.0 { 1.0 - cluster_rate / token_rate } else { 1.0 };
        Ok(ChannelConfig {
            p_tok: token_rate,
            q_same,
            seed,
            k_neighbors: default_k_neighbors(),
        })
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let (_, tok, clu) = CHANNEL_PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| {
                let names: Vec<_> = CHANNEL_PRESETS.iter().map(|p| p.0).collect();
                Error::invalid(format!("unknown channel preset {name:?}; known: {}", names.join(", ")))
            })?;
        Self::from_rates(*tok, *clu, seed)
    }

    pub fn identity() -> Self {
        ChannelConfig {
            p_tok: 0.0,
            q_same: 1.0,
            seed: 0,
            k_neighbors: default_k_neighbors(),
        }
    }

    pub fn expected_cluster_rate(&self) -> f64 {
        self.p_tok * (1.0 - self.q_same)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_tok) || !(0.0..=1.0).contains(&self.q_same) {
            return Err(Error::invalid("p_tok and q_same must lie in [0, 1]"));
        }
        if self.k_neighbors == 0 {
            return Err(Error::invalid("k_neighbors must be at least 1"));
        }
        Ok(())
    }
}

/// Retokenization channel bound to a clustering and its embeddings.
#[derive(Debug, Clone)]
pub struct Channel {
    cfg: ChannelConfig,
    map: ClusterMap,
    /// `k` nearest same-cluster neighbours of every token (self excluded).
    neighbors: Vec<Vec<TokenId>>,
}

impl Channel {
    pub fn new(map: &ClusterMap, emb: &EmbeddingMatrix, cfg: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        if map.n_tokens() != emb.n_tokens() {
            return Err(Error::invalid("cluster map and embeddings cover different vocabularies"));
        }
        let neighbors = (0..emb.n_tokens())
            .map(|i| {
                let row = emb.row(i);
                let mut cand: Vec<(f64, TokenId)> = map
                    .members(map.cluster_of(TokenId(i as u32)))
                    .iter()
                    .filter(|t| t.index() != i)
                    .map(|&t| {
                        let d: f64 = row.iter().zip(emb.row(t.index())).map(|(a, b)| (a - b) * (a - b)).sum();
                        (d, t)
                    })
                    .collect();
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.into_iter().take(cfg.k_neighbors).map(|(_, t)| t).collect()
            })
            .collect();
        Ok(Channel {
            cfg,
            map: map.clone(),
            neighbors,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn apply<R: Rng + ?Sized>(&self, tokens: &[TokenId], rng: &mut R) -> Vec<TokenId> {
        if self.cfg.p_tok == 0.0 {
            return tokens.to_vec();
        }
        let n = self.map.n_tokens();
        tokens
            .iter()
            .map(|&tok| {
                if rng.gen::<f64>() >= self.cfg.p_tok {
                    return tok;
                }
                if rng.gen::<f64>() < self.cfg.q_same {
                    let pool = &self.neighbors[tok.index()];
                    if pool.is_empty() {
                        tok
                    } else {
                        pool[rng.gen_range(0..pool.len())]
                    }
                } else if self.map.h() == 1 {
                    tok
                } else {
                    let own = self.map.cluster_of(tok);
                    loop {
                        let cand = TokenId(rng.gen_range(0..n) as u32);
                        if self.map.cluster_of(cand) != own {
                            break cand;
                        }
                    }
                }
            })
            .collect()
    }
}

/// One-shot channel application seeded by `ch.seed`.
pub fn apply_channel(
    tokens: &[TokenId],
    map: &ClusterMap,
    emb: &EmbeddingMatrix,
    ch: &ChannelConfig,
) -> Result<Vec<TokenId>> {
    let channel = Channel::new(map, emb, *ch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ch.seed);
    Ok(channel.apply(tokens, &mut rng))
}

/// Replaces each position with probability `rate` by a uniformly random token.
pub fn attack_substitute(tokens: &[TokenId], rate: f64, vocab_size: usize, seed: u64) -> Result<Vec<TokenId>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("substitution rate must lie in [0, 1], got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(tokens
        .iter()
        .map(|&t| {
            if rng.gen::<f64>() < rate {
                TokenId(rng.gen_range(0..vocab_size) as u32)
            } else {
                t
            }
        })
        .collect())
}

/// Drops a prefix and a suffix; at least two tokens must remain.
pub fn attack_crop(tokens: &[TokenId], drop_front: usize, drop_back: usize) -> Result<Vec<TokenId>> {
    let dropped = drop_front.saturating_add(drop_back);
    if dropped > tokens.len() || tokens.len() - dropped < 2 {
        return Err(Error::invalid(format!(
            "cropping {drop_front} + {drop_back} of {} tokens leaves fewer than 2",
            tokens.len()
        )));
    }
    Ok(tokens[drop_front..tokens.len() - drop_back].to_vec())
}

/// Per position: delete with `p_del`, otherwise keep and insert a random token after it with `p_ins`.
pub fn attack_insert_delete(
    tokens: &[TokenId],
    p_ins: f64,
    p_del: f64,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<TokenId>> {
    if !(0.0..=1.0).contains(&p_ins) || !(0.0..=1.0).contains(&p_del) {
        return Err(Error::invalid("insertion and deletion rates must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if rng.gen::<f64>() < p_del {
            continue;
        }
        out.push(t);
        if rng.gen::<f64>() < p_ins {
            out.push(TokenId(rng.gen_range(0..vocab_size) as u32));
        }
    }
    Ok(out)
}
