//! Run configuration: one TOML file describing the world, model, training and generation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::inference::{uniform_pmf, DistributionSpec};
use crate::nn::{BlockKind, ModelConfig};
use crate::train::{PretrainConfig, TrainConfig};
use crate::world::WorldSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 100, beta_min: 1e-3, beta_max: 0.2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

/// Architecture knobs; sample size and vocabulary come from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub tokens: usize,
    pub channels: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub blocks: Vec<BlockKind>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            tokens: m.tokens,
            channels: m.channels,
            cond_tokens: m.cond_tokens,
            cond_dim: m.cond_dim,
            attn_dim: m.attn_dim,
            heads: m.heads,
            time_dim: m.time_dim,
            blocks: m.blocks,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, sample_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            sample_dim,
            tokens: self.tokens,
            channels: self.channels,
            cond_tokens: self.cond_tokens,
            cond_dim: self.cond_dim,
            attn_dim: self.attn_dim,
            heads: self.heads,
            time_dim: self.time_dim,
            vocab_size,
            blocks: self.blocks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub n: usize,
    pub guidance_scale: f64,
    /// Defaults to the training `alpha_scale` when absent.
    pub alpha_scale: Option<f64>,
    pub group: String,
    /// One target per debiased attribute; empty means uniform over every attribute.
    pub targets: Vec<DistributionSpec>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { n: 2000, guidance_scale: 1.0, alpha_scale: None, group: "worker".into(), targets: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ground-truth draws per component for the fidelity metric.
    pub reference: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { reference: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "WorldSpec::two_category")]
    pub world: WorldSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Defaults shared by every attribute.
    #[serde(default)]
    pub train: TrainConfig,
    /// Per-attribute overrides of `train` keys, e.g. `[attribute_train.race] gamma = 0.5`.
    #[serde(default)]
    pub attribute_train: BTreeMap<String, toml::Table>,
    /// Attributes to debias, in training order; empty means every attribute in world order.
    #[serde(default)]
    pub train_order: Vec<String>,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSpec::two_category(),
            schedule: ScheduleConfig::default(),
            model: ArchConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            attribute_train: BTreeMap::new(),
            train_order: Vec::new(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_error(e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let key = message.split('`').nth(1).filter(|_| message.contains("field")).unwrap_or("<document>").to_string();
    Error::Config { key, message: e.to_string().trim().to_string() }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "--config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Attributes to debias, in training order.
    pub fn debias_order(&self) -> Vec<String> {
        if self.train_order.is_empty() {
            self.world.attributes.iter().map(|a| a.name.clone()).collect()
        } else {
            self.train_order.clone()
        }
    }

    /// `train` with the overrides for `attribute` applied.
    pub fn train_for(&self, attribute: &str) -> Result<TrainConfig> {
        let Some(over) = self.attribute_train.get(attribute) else {
            return Ok(self.train.clone());
        };
        let mut table = toml::Table::try_from(&self.train).expect("train config serializes");
        for (k, v) in over {
            table.insert(k.clone(), v.clone());
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config {
            key: format!("attribute_train.{attribute}"),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { key, message } => {
                Error::Config { key: key.replacen("train.", &format!("attribute_train.{attribute}."), 1), message }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    /// Targets for every debiased attribute, uniform where not configured.
    pub fn targets(&self) -> Result<Vec<DistributionSpec>> {
        self.debias_order()
            .iter()
            .map(|name| match self.generation.targets.iter().find(|t| &t.attribute == name) {
                Some(t) => Ok(t.clone()),
                None => {
                    let k = self
                        .world
                        .attributes
                        .iter()
                        .find(|a| &a.name == name)
                        .map(|a| a.len())
                        .ok_or_else(|| Error::config("train_order", format!("unknown attribute `{name}`")))?;
                    uniform_pmf(name, k)
                }
            })
            .collect()
    }

    pub fn alpha_scale(&self) -> f64 {
        self.generation.alpha_scale.unwrap_or(self.train.alpha_scale)
    }

    /// Checks every precondition that can be checked without computing anything.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.schedule.build()?;
        let vocab = crate::world::ConditionVocab::new(&self.world);
        self.model.model_config(self.world.dim, vocab.len()).validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let names: Vec<&str> = self.world.attributes.iter().map(|a| a.name.as_str()).collect();
        for a in self.attribute_train.keys() {
            if !names.contains(&a.as_str()) {
                return Err(Error::config(format!("attribute_train.{a}"), "unknown attribute"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.train_order {
            if !names.contains(&a.as_str()) {
                return Err(Error::config("train_order", format!("unknown attribute `{a}`")));
            }
            if !seen.insert(a) {
                return Err(Error::config("train_order", format!("`{a}` listed twice")));
            }
        }
        for a in self.debias_order() {
            let t = self.train_for(&a)?;
            if vocab.id(&t.group).is_err() {
                return Err(Error::config("train.group", format!("unknown condition `{}`", t.group)));
            }
        }
        if !self.world.groups.iter().any(|g| g.name == self.generation.group) {
            return Err(Error::config("generation.group", format!("unknown group `{}`", self.generation.group)));
        }
        if !self.generation.guidance_scale.is_finite() {
            return Err(Error::config("generation.guidance_scale", "must be finite"));
        }
        if self.eval.reference == 0 {
            return Err(Error::config("eval.reference", "must be at least 1"));
        }
        let order = self.debias_order();
        for t in &self.generation.targets {
            let attr =
                self.world.attributes.iter().find(|a| a.name == t.attribute).ok_or_else(|| {
                    Error::config("generation.targets", format!("unknown attribute `{}`", t.attribute))
                })?;
            if !order.contains(&t.attribute) {
                return Err(Error::config("generation.targets", format!("`{}` is not in train_order", t.attribute)));
            }
            if attr.len() != t.len() {
                return Err(Error::config(
                    "generation.targets",
                    format!("`{}` has {} categories, target has {}", t.attribute, attr.len(), t.len()),
                ));
            }
            t.validate().map_err(|e| Error::config("generation.targets", e.to_string()))?;
        }
        Ok(())
    }
}
