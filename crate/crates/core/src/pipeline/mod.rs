//! Four-stage training: language-model pretraining, pair SFT, weakly supervised
//! contrastive training under a scheduled soft mask, and supervised multi-task
//! fine-tuning with hard-negative mining.

mod evaluate;
mod optim;
mod runner;
pub mod selfcheck;
mod trainer;


use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::TaskKind;
use crate::dhnm::ThresholdMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::maskschedule::ScheduleKind;

pub use evaluate::{contrastive_eval_loss, embed_strings, evaluate_examples, retrieval_run};
pub use optim::{AdamW, AdamWConfig};
pub use runner::{
    load_model, run_manifest, write_toy_workspace, ModelBundle, RunOptions, RunSummary, ToySpec,
};
pub use trainer::{MiningEvent, StageTrainer, StepMetric, TaskData, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    LmPretrain,
    PairSft,
    WeakContrastive,
    Supervised,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::LmPretrain => "lm-pretrain",
            StageKind::PairSft => "pair-sft",
            StageKind::WeakContrastive => "weak-contrastive",
            StageKind::Supervised => "supervised",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Attention mask used while training a stage. Written `causal`,
/// `bidirectional` or `soft:<schedule>` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MaskPolicy {
    Causal,
    Bidirectional,
    Soft(ScheduleKind),
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::Causal => f.write_str("causal"),
            MaskPolicy::Bidirectional => f.write_str("bidirectional"),
            MaskPolicy::Soft(k) => write!(f, "soft:{k}"),
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskPolicy::Causal),
            "bidirectional" => Ok(MaskPolicy::Bidirectional),
            _ => match s.strip_prefix("soft:") {
                Some(k) => Ok(MaskPolicy::Soft(k.parse()?)),
                None => Err(Error::Parse(format!(
                    "unknown mask policy {s:?} (causal, bidirectional or soft:<schedule>)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for MaskPolicy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskPolicy> for String {
    fn from(m: MaskPolicy) -> String {
        m.to_string()
    }
}

/// One stage's hyperparameters. Unset optional fields take per-kind defaults
/// through the accessor methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kind: StageKind,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Queries per retrieval batch; each carries its own explicit negatives.
    #[serde(default = "default_triplet_batch")]
    pub triplet_batch_size: usize,
    #[serde(default = "default_batch")]
    pub sts_batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskPolicy>,
    /// Per-task loss weights; tasks left out default to their share of the data.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub loss_weights: BTreeMap<TaskKind, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives_per_query: Option<usize>,
    #[serde(default)]
    pub mrl: bool,
    /// Hard-negative mining mode; absent means mining is off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dhnm: Option<ThresholdMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_temperature")]
    pub cosent_tau: f64,
    /// Replacement candidates kept per query for mining.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
}

fn default_batch() -> usize {
    32
}
fn default_triplet_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_temperature() -> f64 {
    0.05
}
fn default_pool() -> usize {
    32
}

pub const DEFAULT_NEGATIVES: usize = 7;

impl StageConfig {
    pub fn new(kind: StageKind, steps: u64) -> Self {
        StageConfig {
            kind,
            steps,
            batch_size: default_batch(),
            triplet_batch_size: default_triplet_batch(),
            sts_batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            warmup_fraction: None,
            mask: None,
            loss_weights: BTreeMap::new(),
            negatives_per_query: None,
            mrl: false,
            dhnm: None,
            seed: None,
            temperature: default_temperature(),
            cosent_tau: default_temperature(),
            pool_size: default_pool(),
        }
    }

    pub fn mask_policy(&self) -> MaskPolicy {
        self.mask.unwrap_or(match self.kind {
            StageKind::LmPretrain | StageKind::PairSft => MaskPolicy::Causal,
            StageKind::WeakContrastive => MaskPolicy::Soft(ScheduleKind::Linear),
            StageKind::Supervised => MaskPolicy::Bidirectional,
        })
    }

    pub fn warmup(&self) -> f64 {
        self.warmup_fraction.unwrap_or(match self.kind {
            StageKind::LmPretrain => 0.05,
            _ => 0.02,
        })
    }

    pub fn negatives(&self) -> usize {
        self.negatives_per_query.unwrap_or(match self.kind {
            StageKind::Supervised => DEFAULT_NEGATIVES,
            _ => 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("{} stage: {m}", self.kind)));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 || self.triplet_batch_size == 0 || self.sts_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} / weight_decay {} out of range", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup()) {
            return bad(format!("warmup fraction {} outside [0, 1)", self.warmup()));
        }
        if !(self.temperature > 0.0) || !(self.cosent_tau > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.loss_weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if let MaskPolicy::Soft(_) = self.mask_policy() {
            if self.kind != StageKind::WeakContrastive {
                return bad("a soft mask is only allowed in the weak-contrastive stage".into());
            }
            if self.steps < 2 {
                return bad("a soft mask needs at least 2 steps".into());
            }
        }
        if self.dhnm.is_some() && self.kind != StageKind::Supervised {
            return bad("hard-negative mining is only allowed in the supervised stage".into());
        }
        if self.dhnm.is_some() && self.negatives() == 0 {
            return bad("hard-negative mining needs negatives_per_query > 0".into());
        }
        Ok(())
    }
}

/// One `[[stage]]` table of a manifest: hyperparameters plus data files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    #[serde(flatten)]
    pub config: StageConfig,
    pub data: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<PathBuf>,
}

/// A whole training run. Relative paths resolve against the manifest's directory.
///
/// ```toml
/// output_dir = "out"
/// seed = 7
///
/// [encoder]
/// layers = 2
/// hidden_dim = 64
/// heads = 8
/// kv_heads = 2
/// ffn_dim = 128
/// vocab_size = 512
/// max_len = 64
/// mrl_dims = [16, 32, 48, 64]
///
/// [[stage]]
/// kind = "lm-pretrain"
/// steps = 500
/// data = ["text.jsonl"]
///
/// [[stage]]
/// kind = "weak-contrastive"
/// steps = 500
/// mask = "soft:linear"
/// data = ["weak.jsonl"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub encoder: EncoderConfig,
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: RunManifest = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.stages.is_empty() {
            return Err(Error::invalid("manifest has no stages"));
        }
        for w in self.stages.windows(2) {
            if w[0].config.kind >= w[1].config.kind {
                return Err(Error::invalid(format!(
                    "stage {} cannot follow {}; stages run in pipeline order",
                    w[1].config.kind, w[0].config.kind
                )));
            }
        }
        for s in &self.stages {
            s.config.validate()?;
            if s.data.is_empty() {
                return Err(Error::invalid(format!("{} stage lists no data", s.config.kind)));
            }
        }
        Ok(())
    }

    /// Seed for stage `index`: its own if set, else derived from the run seed.
    pub fn stage_seed(&self, index: usize) -> u64 {
        self.stages[index]
            .config
            .seed
            .unwrap_or_else(|| self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1))
    }
}
