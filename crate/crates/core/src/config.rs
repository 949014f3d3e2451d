//! Run configuration: TOML file, `VSTAIN__SECTION__KEY` environment overrides,
//! unknown keys rejected, paths resolved against the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ToyBackbone, ToyBackboneConfig};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::failure::FailureConfig;
use crate::generator::GeneratorConfig;
use crate::losses::LossConfig;
use crate::perceptual::{RandomConvConfig, RandomConvFeatures};
use crate::processor::ProcessorConfig;
use crate::stain::StainConfig;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "VSTAIN__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toy,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub seed: u64,
    pub toy: ToyBackboneConfig,
    /// Weights for `kind = "pretrained"`.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { kind: BackboneKind::Toy, seed: 0, toy: ToyBackboneConfig::default(), weights: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Random,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub random: RandomConvConfig,
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { kind: ExtractorKind::Random, seed: 0, random: RandomConvConfig::default(), weights: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub stain: StainConfig,
    pub backbone: BackboneConfig,
    pub processor: ProcessorConfig,
    pub generator: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub loss: LossConfig,
    pub perceptual: ExtractorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub failure: FailureConfig,
}

impl RunConfig {
    /// Reduced widths and sides for CPU runs: 32-px crops of 64-px sources, an
    /// 8×8 token grid and loss resolutions scaled by 1/16.
    pub fn desk() -> RunConfig {
        let mut c = RunConfig::default();
        c.backbone.toy = ToyBackboneConfig { token_dim: 32, native_side: 16, patch: 4 };
        c.processor = ProcessorConfig { token_dim: 32, grid_side: 8, channels: 16, num_scales: 2, res_blocks: 2, groups: 4 };
        c.generator = GeneratorConfig {
            resolution: 32,
            encoder_channels: vec![3, 16, 32, 32],
            bottleneck_blocks: 2,
            head_channels: 16,
            edge_channels: 8,
            spade_hidden: 16,
            embedding_dim: 16,
            ..GeneratorConfig::default()
        };
        c.disc.channels = vec![16, 32, 32, 32];
        c.loss.percept_scales = vec![(8, 1.0), (16, 0.5)];
        c.loss.l1_size = 4;
        c.loss.edge_scales = vec![32, 16];
        c.perceptual.random.channels = vec![8, 16, 16];
        c.train.crop = 32;
        c.train.steps = 2000;
        c.train.warmup = 100;
        c.train.adv_start = 1000;
        c.train.g_opt.lr = 1e-3;
        c.train.d_opt.lr = 4e-3;
        c.train.checkpoint_every = 1000;
        c.eval.crop = 32;
        c.eval.source_side = 64;
        c.failure.classifier_side = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.stain.validate()?;
        self.processor.validate()?;
        self.generator.validate(&self.processor)?;
        self.disc.validate()?;
        self.loss.validate(self.generator.resolution)?;
        self.train.validate()?;
        self.eval.validate()?;
        self.failure.validate()?;
        if self.backbone.toy.token_dim != self.processor.token_dim {
            return Err(Error::Config(format!(
                "backbone.toy.token_dim {} differs from processor.token_dim {}",
                self.backbone.toy.token_dim, self.processor.token_dim
            )));
        }
        if self.train.crop != self.generator.resolution {
            return Err(Error::Config("train.crop must equal generator.resolution".into()));
        }
        if self.train.tokens.len() != self.generator.num_classes {
            return Err(Error::Config("train.tokens length must equal generator.num_classes".into()));
        }
        Ok(())
    }

    /// Parses TOML text, applies `VSTAIN__…` overrides from `env`, validates, and
    /// resolves relative paths against `base`.
    pub fn from_toml_str(text: &str, env: impl IntoIterator<Item = (String, String)>, base: &Path) -> Result<RunConfig> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in env {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                apply_override(&mut value, rest, &v)?;
            }
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for p in [&mut cfg.backbone.weights, &mut cfg.perceptual.weights] {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, std::env::vars(), base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<RunConfig> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))
    }

    pub fn backbone(&self) -> Result<Box<dyn Backbone>> {
        match self.backbone.kind {
            BackboneKind::Toy => Ok(Box::new(ToyBackbone::new(self.backbone.seed, self.backbone.toy.clone())?)),
            BackboneKind::Pretrained => Err(Error::Dependency {
                name: "pretrained backbone".into(),
                detail: "no pretrained pathology backbone runtime is bundled; use backbone.kind = \"toy\" or supply an adapter".into(),
            }),
        }
    }

    pub fn perceptual_extractor(&self) -> Result<RandomConvFeatures> {
        match self.perceptual.kind {
            ExtractorKind::Random => Ok(RandomConvFeatures::new(self.perceptual.seed, &self.perceptual.random)),
            ExtractorKind::Pretrained => Err(Error::Dependency {
                name: "pretrained perceptual network".into(),
                detail: "no pretrained weights runtime is bundled; use perceptual.kind = \"random\"".into(),
            }),
        }
    }
}

/// `SECTION__KEY=value`; the value is read as a TOML literal, falling back to a string.
fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<String> = key.split("__").map(|p| p.to_lowercase()).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {ENV_PREFIX}{key}")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {ENV_PREFIX}{key}: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].clone(), value);
    Ok(())
}
