//! Experiment recipes: distortion audit, detectability, robustness, cluster-count ablation.

use std::collections::BTreeMap;
use std::sync::Arc;

use clusterwm_core::clustering::{mismatch_rates, ClusterMap};
use clusterwm_core::detect::chi_square_gof;
use clusterwm_core::generate::{generate, GenerationSession, LanguageModel, Scheme};
use clusterwm_core::prf::prf_permutation;
use clusterwm_core::reweight::{
    aligned_marginal, cluster_probs, dipmark_reweight_permuted, its_marginal, GreenList, ReweightConfig,
    SegmentTable,
};
use clusterwm_core::simenv::ChannelConfig;
use clusterwm_core::{ProbVector, TokenId, WatermarkCode, WatermarkKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, HarnessResult};
use crate::harness::{derive_seed, detect_all, median, Attack, AttackRunner, Outcome, World};
use crate::table::{fpr_label, ResultRow, ResultTable};

/// Tolerance for exact-integration distortion checks.
pub const EXACT_TV_TOL: f64 = 1e-12;

fn rate(outcomes: &[Outcome], k: usize) -> f64 {
    outcomes.iter().filter(|o| o.flagged[k]).count() as f64 / outcomes.len().max(1) as f64
}

/// Summarizes watermarked and null outcomes of one cell.
pub fn make_row(
    method: &ReweightConfig,
    setting: &str,
    fpr_grid: &[f64],
    wm: &[Outcome],
    null: &[Outcome],
) -> ResultRow {
    let tpr_at_fpr = fpr_grid.iter().enumerate().map(|(k, f)| (fpr_label(*f), rate(wm, k))).collect();
    let fpr_empirical = fpr_grid.iter().enumerate().map(|(k, f)| (fpr_label(*f), rate(null, k))).collect();
    let scored: Vec<&Outcome> = wm.iter().filter(|o| o.t > 0).collect();
    let steps: usize = scored.iter().map(|o| o.t).sum();
    let mut ps: Vec<f64> = wm.iter().map(|o| o.p_exact).collect();
    ResultRow {
        method: method.name().to_string(),
        params: method.params(),
        setting: setting.to_string(),
        trials: wm.len(),
        mean_t: wm.iter().map(|o| o.t as f64).sum::<f64>() / wm.len().max(1) as f64,
        tpr_at_fpr,
        fpr_empirical,
        median_p: median(&mut ps),
        mean_step_score: scored.iter().map(|o| o.score).sum::<f64>() / steps.max(1) as f64,
        null_step_rate: scored.first().map_or(f64::NAN, |o| o.null_rate),
        extra: BTreeMap::new(),
    }
}

fn channel_attack(world: &World) -> HarnessResult<(Attack, String)> {
    match &world.cfg.channel {
        None => Ok((Attack::Identity, "none".to_string())),
        Some(spec) => {
            let cfg = spec.resolve(derive_seed(world.cfg.seed, "channel", 0))?;
            Ok((Attack::Channel(cfg), spec.label()))
        }
    }
}

fn watermarked_corpus(world: &World, method: &ReweightConfig, map: &Arc<ClusterMap>) -> HarnessResult<Vec<Vec<TokenId>>> {
    let scheme = world.scheme(method, map)?;
    (0..world.cfg.trials as u64)
        .into_par_iter()
        .map(|i| world.watermarked(method, &scheme, i))
        .collect()
}

fn attacked(runner: &AttackRunner, seqs: &[Vec<TokenId>]) -> HarnessResult<Vec<Vec<TokenId>>> {
    seqs.par_iter()
        .enumerate()
        .map(|(i, s)| runner.apply(s, i as u64))
        .collect()
}

/// TPR at guaranteed thresholds for every configured method under the configured channel.
pub fn run_detectability(world: &World) -> HarnessResult<ResultTable> {
    let cfg = &world.cfg;
    let (attack, setting) = channel_attack(world)?;
    let null_runner = AttackRunner::new(world, attack.clone(), "null-attack")?;
    let wm_runner = AttackRunner::new(world, attack, "wm-attack")?;
    let null = attacked(&null_runner, &world.null_corpus()?)?;
    let mut table = ResultTable::new("detectability", cfg.seed, &cfg.fpr_grid);
    for method in cfg.methods() {
        let wm = attacked(&wm_runner, &watermarked_corpus(world, &method, &world.map)?)?;
        let det = world.detector(&method, &world.map);
        let wm_out = detect_all(&det, &wm, &cfg.fpr_grid)?;
        let null_out = detect_all(&det, &null, &cfg.fpr_grid)?;
        table.rows.push(make_row(&method, &setting, &cfg.fpr_grid, &wm_out, &null_out));
    }
    Ok(table)
}

/// The attack grid of the robustness recipe.
pub fn robustness_attacks(world: &World) -> HarnessResult<Vec<Attack>> {
    let r = &world.cfg.robustness;
    let mut attacks = vec![Attack::Identity];
    attacks.extend(r.substitute_rates.iter().map(|&x| Attack::Substitute(x)));
    attacks.extend(r.crop_lengths.iter().map(|&k| Attack::Crop(k)));
    attacks.extend(r.insert_delete_rates.iter().map(|&x| Attack::InsertDelete(x)));
    for name in &r.channel_presets {
        attacks.push(Attack::Channel(ChannelConfig::preset(
            name,
            derive_seed(world.cfg.seed, "channel", 0),
        )?));
    }
    Ok(attacks)
}

fn attack_setting(a: &Attack) -> String {
    match a {
        Attack::Identity => "identity".to_string(),
        other => format!("{}:{}", other.kind(), other.level()),
    }
}

/// One TPR per (attack, method) cell; watermarked and null corpora are generated once.
pub fn run_robustness(world: &World, attacks: &[Attack]) -> HarnessResult<ResultTable> {
    let cfg = &world.cfg;
    let null = world.null_corpus()?;
    let methods = cfg.methods();
    let corpora = methods
        .iter()
        .map(|m| watermarked_corpus(world, m, &world.map))
        .collect::<HarnessResult<Vec<_>>>()?;
    let mut table = ResultTable::new("robustness", cfg.seed, &cfg.fpr_grid);
    for attack in attacks {
        let setting = attack_setting(attack);
        let null_runner = AttackRunner::new(world, attack.clone(), "null-attack")?;
        let wm_runner = AttackRunner::new(world, attack.clone(), "wm-attack")?;
        let null_att = attacked(&null_runner, &null)?;
        for (method, corpus) in methods.iter().zip(&corpora) {
            let det = world.detector(method, &world.map);
            let wm_out = detect_all(&det, &attacked(&wm_runner, corpus)?, &cfg.fpr_grid)?;
            let null_out = detect_all(&det, &null_att, &cfg.fpr_grid)?;
            table.rows.push(make_row(method, &setting, &cfg.fpr_grid, &wm_out, &null_out));
        }
    }
    Ok(table)
}

/// Aligned-IS detectability as a function of the cluster count, refitting clusters per `h`.
pub fn run_ablation_h(world: &World, h_grid: &[usize]) -> HarnessResult<ResultTable> {
    let cfg = &world.cfg;
    let (attack, setting) = channel_attack(world)?;
    let null_runner = AttackRunner::new(world, attack.clone(), "null-attack")?;
    let wm_runner = AttackRunner::new(world, attack, "wm-attack")?;
    let null = attacked(&null_runner, &world.null_corpus()?)?;
    let mut table = ResultTable::new("ablation_h", cfg.seed, &cfg.fpr_grid);
    for &h in h_grid {
        let map = Arc::new(world.embeddings.fit(&cfg.cluster, h)?);
        let method = ReweightConfig::AlignedIs { h };
        let clean = watermarked_corpus(world, &method, &map)?;
        let wm = attacked(&wm_runner, &clean)?;
        let det = world.detector(&method, &map);
        let wm_out = detect_all(&det, &wm, &cfg.fpr_grid)?;
        let null_out = detect_all(&det, &null, &cfg.fpr_grid)?;
        let mut row = make_row(&method, &setting, &cfg.fpr_grid, &wm_out, &null_out);
        let (mut tok, mut clu, mut n) = (0.0, 0.0, 0.0);
        for (a, b) in clean.iter().zip(&wm) {
            let m = mismatch_rates(a, b, &map)?;
            let len = a.len() as f64;
            tok += m.token_rate * len;
            clu += m.cluster_rate * len;
            n += len;
        }
        row.extra.insert("token_mismatch".into(), tok / n);
        row.extra.insert("cluster_mismatch".into(), clu / n);
        table.rows.push(row);
    }
    Ok(table)
}

/// One check of the distortion audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub method: String,
    pub params: String,
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Whether the method is expected to pass (false for biased baselines).
    pub expected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub seed: u64,
    pub contexts: usize,
    pub keys: usize,
    pub rows: Vec<AuditRow>,
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn random_dist<R: Rng>(n: usize, rng: &mut R) -> ProbVector {
    let w: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
    ProbVector::normalized(w).expect("positive weights")
}

/// Largest exact-integration TV distance over sampled contexts, or `None` when
/// the method has no exact marginal.
fn exact_tv(world: &World, method: &ReweightConfig, contexts: &[TokenId]) -> HarnessResult<Option<f64>> {
    let mut worst: f64 = 0.0;
    for &c in contexts {
        let ctx = [c];
        let dist = world.model.next_dist(&ctx);
        let code = WatermarkCode::new(&world.key, &ctx)?;
        let marginal = match *method {
            ReweightConfig::AlignedIs { .. } => {
                let table = SegmentTable::build(&cluster_probs(&dist, &world.map)?)?;
                aligned_marginal(&table, &dist, &world.map)?
            }
            ReweightConfig::Its {} => its_marginal(&dist, &prf_permutation(&code, dist.len())),
            _ => return Ok(None),
        };
        worst = worst.max(tv(&marginal, dist.as_slice()));
    }
    Ok(Some(worst))
}

/// Average of the DiPmark reweight over all 6 permutations of a 3-token vocabulary.
fn dipmark_enumeration_tv(alpha: f64, rng: &mut ChaCha8Rng, draws: usize) -> HarnessResult<f64> {
    const PERMS: [[u32; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let dist = random_dist(3, rng);
        let mut avg = [0.0; 3];
        for p in &PERMS {
            let q = dipmark_reweight_permuted(&dist, p, alpha)?;
            for (a, v) in avg.iter_mut().zip(q.as_slice()) {
                *a += v / 6.0;
            }
        }
        worst = worst.max(tv(&avg, dist.as_slice()));
    }
    Ok(worst)
}

/// Largest standardized deviation of the key-averaged green-list reweight from the model.
fn green_bias_z(world: &World, dist: &ProbVector, delta: f64, gamma: f64, keys: usize) -> HarnessResult<f64> {
    let n = dist.len();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..keys {
        let key = WatermarkKey::new(format!("{}/audit-green/{i}", world.cfg.seed))?;
        let q = GreenList::new(&WatermarkCode::global(&key), n, gamma).boost(dist, delta)?;
        for (j, v) in q.as_slice().iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let k = keys as f64;
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let mean = sum[j] / k;
        let var = (sq[j] / k - mean * mean).max(0.0);
        let se = (var / k).sqrt();
        if se > 0.0 {
            worst = worst.max((mean - dist.prob(TokenId(j as u32))).abs() / se);
        }
    }
    Ok(worst)
}

/// First-step token counts over independent keys, tested against the model distribution.
fn first_step_chi2(world: &World, method: &ReweightConfig, prompt: TokenId, keys: usize) -> HarnessResult<f64> {
    let vocab = world.vocab_size();
    let counts = (0..keys as u64)
        .into_par_iter()
        .map(|i| {
            let key = WatermarkKey::new(format!("{}/audit/{}/{i}", world.cfg.seed, method.name()))?;
            let scheme = Scheme::from_config(method, &key, Some(world.map.clone()), vocab)?;
            let seed = derive_seed(world.cfg.seed, "audit-chi2", i);
            let mut session = GenerationSession::new(key, 1, scheme, seed)?;
            Ok(generate(&world.model, &[prompt], 1, &mut session)?[0])
        })
        .collect::<HarnessResult<Vec<TokenId>>>()?
        .into_iter()
        .fold(vec![0u64; vocab], |mut acc, t| {
            acc[t.index()] += 1;
            acc
        });
    let dist = world.model.next_dist(&[prompt]);
    Ok(chi_square_gof(&counts, dist.as_slice(), 5.0)?.p_value)
}

/// Distortion-freeness audit: exact integration where available, key-averaging otherwise,
/// and an end-to-end first-step chi-square test for every method.
pub fn run_distortion_audit(world: &World) -> HarnessResult<AuditReport> {
    let cfg = &world.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "audit", 0));
    let vocab = world.vocab_size();
    let contexts: Vec<TokenId> = (0..cfg.audit.contexts)
        .map(|_| TokenId(rng.gen_range(0..vocab) as u32))
        .collect();
    let prompt = contexts.first().copied().unwrap_or(TokenId(0));
    let mut rows = Vec::new();
    for method in cfg.methods() {
        let row = |check: &str, value: f64, threshold: f64, passed: bool| AuditRow {
            method: method.name().to_string(),
            params: method.params(),
            check: check.to_string(),
            value,
            threshold,
            passed,
            expected: method.is_distortion_free(),
        };
        if let Some(worst) = exact_tv(world, &method, &contexts)? {
            rows.push(row("exact_tv_max", worst, EXACT_TV_TOL, worst < EXACT_TV_TOL));
        }
        match method {
            ReweightConfig::Dipmark { alpha } => {
                let worst = dipmark_enumeration_tv(alpha, &mut rng, cfg.audit.contexts)?;
                rows.push(row("permutation_average_tv_n3", worst, EXACT_TV_TOL, worst < EXACT_TV_TOL));
            }
            ReweightConfig::GammaReweight {} => {
                let worst = dipmark_enumeration_tv(0.5, &mut rng, cfg.audit.contexts)?;
                rows.push(row("permutation_average_tv_n3", worst, EXACT_TV_TOL, worst < EXACT_TV_TOL));
            }
            ReweightConfig::Kgw { delta, gamma } | ReweightConfig::Unigram { delta, gamma } => {
                let dist = world.model.next_dist(&[prompt]);
                let z = green_bias_z(world, &dist, delta, gamma, cfg.audit.keys.clamp(2, 2000))?;
                rows.push(row("key_average_max_z", z, 6.0, z < 6.0));
            }
            _ => {}
        }
        let p = first_step_chi2(world, &method, prompt, cfg.audit.keys)?;
        rows.push(row("first_step_chi2_p", p, 0.01, p >= 0.01));
    }
    for r in &rows {
        if r.expected && r.check != "first_step_chi2_p" && !r.passed {
            return Err(HarnessError::Invariant(format!(
                "{} {} failed {}: {} >= {}",
                r.method, r.params, r.check, r.value, r.threshold
            )));
        }
    }
    Ok(AuditReport {
        seed: cfg.seed,
        contexts: cfg.audit.contexts,
        keys: cfg.audit.keys,
        rows,
    })
}
