//! Experiment configuration, read from a single JSON file.

use std::path::{Path, PathBuf};

use clusterwm_core::reweight::ReweightConfig;
use clusterwm_core::simenv::{ChannelConfig, SyntheticModelConfig};
use clusterwm_core::WatermarkKey;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, HarnessResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub watermark: WatermarkSection,
    /// Preset name, explicit channel parameters, or null for no channel.
    #[serde(default)]
    pub channel: Option<ChannelSpec>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Number of scored steps per sequence.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_fpr_grid")]
    pub fpr_grid: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub audit: AuditSection,
    #[serde(default)]
    pub robustness: RobustnessSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

fn default_trials() -> usize {
    500
}
fn default_seq_len() -> usize {
    500
}
fn default_fpr_grid() -> Vec<f64> {
    vec![0.01, 0.001]
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Where token embeddings (and the generation model) come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Synthetic(SyntheticModelConfig),
    /// Embeddings from a file; generation uses a Dirichlet model over the same vocabulary.
    EmbeddingFile {
        path: PathBuf,
        #[serde(default = "default_beta")]
        dirichlet_beta: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_beta() -> f64 {
    SyntheticModelConfig::default().dirichlet_beta
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Synthetic(SyntheticModelConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Reorder cluster indices so consecutive bins hold far-apart clusters.
    #[serde(default)]
    pub relabel: bool,
}

fn default_h() -> usize {
    20
}
fn default_max_iters() -> usize {
    300
}
fn default_tol() -> f64 {
    1e-8
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            h: default_h(),
            seed: 0,
            max_iters: default_max_iters(),
            tol: default_tol(),
            relabel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSection {
    #[serde(default)]
    pub key: Option<String>,
    #[serde(default = "default_ngram")]
    pub ngram_n: usize,
    /// Methods compared by the experiments; `aligned_is` takes `h` from the cluster section
    /// when its own `h` differs only because of an ablation override.
    #[serde(default = "default_methods")]
    pub methods: Vec<ReweightConfig>,
    /// Fraction of the permuted order outside the DiPmark green region at detection time.
    #[serde(default = "default_alpha_detect")]
    pub dipmark_alpha_detect: f64,
    /// Skip repeated watermark codes when scoring.
    #[serde(default)]
    pub dedup_on_detect: bool,
}

fn default_ngram() -> usize {
    1
}
fn default_alpha_detect() -> f64 {
    0.5
}

pub fn default_methods() -> Vec<ReweightConfig> {
    vec![
        ReweightConfig::AlignedIs { h: default_h() },
        ReweightConfig::Its {},
        ReweightConfig::Kgw { delta: 2.0, gamma: 0.5 },
        ReweightConfig::Unigram { delta: 2.0, gamma: 0.5 },
        ReweightConfig::Dipmark { alpha: 0.4 },
        ReweightConfig::GammaReweight {},
    ]
}

impl Default for WatermarkSection {
    fn default() -> Self {
        WatermarkSection {
            key: None,
            ngram_n: default_ngram(),
            methods: default_methods(),
            dipmark_alpha_detect: default_alpha_detect(),
            dedup_on_detect: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelSpec {
    Preset(String),
    Explicit(ChannelConfig),
}

impl ChannelSpec {
    pub fn resolve(&self, seed: u64) -> HarnessResult<ChannelConfig> {
        match self {
            ChannelSpec::Preset(name) => Ok(ChannelConfig::preset(name, seed)?),
            ChannelSpec::Explicit(cfg) => {
                cfg.validate()?;
                Ok(*cfg)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            ChannelSpec::Preset(name) => name.clone(),
            ChannelSpec::Explicit(c) => format!("p_tok={};q_same={}", c.p_tok, c.q_same),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    /// Random contexts for the exact-integration check.
    #[serde(default = "default_contexts")]
    pub contexts: usize,
    /// Keys averaged in the end-to-end first-step chi-square test.
    #[serde(default = "default_keys")]
    pub keys: usize,
}

fn default_contexts() -> usize {
    100
}
fn default_keys() -> usize {
    10_000
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            contexts: default_contexts(),
            keys: default_keys(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    #[serde(default = "default_sub_rates")]
    pub substitute_rates: Vec<f64>,
    /// Retained token counts for the crop study.
    #[serde(default = "default_crop_lengths")]
    pub crop_lengths: Vec<usize>,
    /// Equal insertion and deletion rates.
    #[serde(default = "default_indel_rates")]
    pub insert_delete_rates: Vec<f64>,
    #[serde(default = "default_presets")]
    pub channel_presets: Vec<String>,
}

fn default_sub_rates() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.5, 1.0]
}
fn default_crop_lengths() -> Vec<usize> {
    vec![50, 100, 200, 300, 400, 500]
}
fn default_indel_rates() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.2]
}
fn default_presets() -> Vec<String> {
    clusterwm_core::simenv::CHANNEL_PRESETS.iter().map(|p| p.0.to_string()).collect()
}

impl Default for RobustnessSection {
    fn default() -> Self {
        RobustnessSection {
            substitute_rates: default_sub_rates(),
            crop_lengths: default_crop_lengths(),
            insert_delete_rates: default_indel_rates(),
            channel_presets: default_presets(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "default_h_grid")]
    pub h_grid: Vec<usize>,
}

fn default_h_grid() -> Vec<usize> {
    vec![5, 10, 20, 40, 80]
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { h_grid: default_h_grid() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> HarnessResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            HarnessError::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        if self.watermark.ngram_n < 1 {
            return bad("watermark.ngram_n must be at least 1".into());
        }
        if self.seq_len < 1 {
            return bad("seq_len must be at least 1 scored step".into());
        }
        if let Some(f) = self.fpr_grid.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return bad(format!("fpr_grid entries must lie in (0, 1), got {f}"));
        }
        if self.cluster.h < 1 {
            return bad("cluster.h must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.watermark.dipmark_alpha_detect) {
            return bad("watermark.dipmark_alpha_detect must lie in [0, 1)".into());
        }
        for m in &self.watermark.methods {
            m.validate()?;
        }
        if let Some(ch) = &self.channel {
            ch.resolve(0)?;
        }
        Ok(())
    }

    /// The watermark key, which must be configured or supplied on the command line.
    pub fn key(&self) -> HarnessResult<WatermarkKey> {
        match &self.watermark.key {
            Some(k) => Ok(WatermarkKey::new(k.as_bytes())?),
            None => Err(HarnessError::Usage(
                "no watermark key: set watermark.key in the config or pass --key".into(),
            )),
        }
    }

    /// Methods with `aligned_is` pinned to the configured cluster count.
    pub fn methods(&self) -> Vec<ReweightConfig> {
        self.watermark
            .methods
            .iter()
            .map(|m| match m {
                ReweightConfig::AlignedIs { .. } => ReweightConfig::AlignedIs { h: self.cluster.h },
                other => *other,
            })
            .collect()
    }
}
