//! Run configuration: a TOML file holding training fields at the top level
//! and an optional `[model]` table, or the `resolved` block of an earlier
//! run manifest.

use std::path::Path;

use polyp_ses::ses::PartitionConfig;
use polyp_ses::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::fail::Failure;

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    FullScale,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    #[serde(default)]
    preset: Preset,
    stage_channels: Option<[usize; 4]>,
    blocks_per_stage: Option<[usize; 4]>,
    attention_heads: Option<usize>,
    msfa_channels: Option<usize>,
    partition: Option<PartitionConfig>,
    backbone: Option<String>,
}

impl ModelSection {
    fn build(self, image_size: (usize, usize)) -> ModelConfig {
        let mut m = match self.preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::FullScale => ModelConfig::full_scale(),
        };
        m.encoder.input_size = image_size;
        if let Some(c) = self.stage_channels {
            m.encoder.stage_channels = c;
        }
        if let Some(b) = self.blocks_per_stage {
            m.encoder.blocks_per_stage = b;
        }
        if let Some(h) = self.attention_heads {
            m.encoder.attention_heads = h;
        }
        if let Some(c) = self.msfa_channels {
            m.msfa_channels = c;
        }
        if let Some(p) = self.partition {
            m.partition = p;
        }
        if let Some(b) = self.backbone {
            m.ablation.backbone_name = b;
        }
        m
    }
}

/// Everything needed to rebuild a run's model and trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolved {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

#[derive(Deserialize)]
struct ManifestView {
    resolved: Resolved,
}

impl Resolved {
    /// Parses `text`; `.json` files are read as run manifests.
    pub fn parse(path: &Path, text: &str) -> Result<Self, Failure> {
        let bad =
            |e: &dyn std::fmt::Display| Failure::input(format!("config {}: {e}", path.display()));
        let resolved = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            serde_json::from_str::<ManifestView>(text)
                .map_err(|e| bad(&e))?
                .resolved
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
            let model: ModelSection = match table.remove("model") {
                Some(v) => v.try_into().map_err(|e| bad(&e))?,
                None => ModelSection::default(),
            };
            let train: TrainConfig = toml::Value::Table(table).try_into().map_err(|e| bad(&e))?;
            let model = model.build(train.image_size);
            Resolved { train, model }
        };
        resolved.train.validate().map_err(|e| bad(&e))?;
        resolved.model.validate().map_err(|e| bad(&e))?;
        Ok(resolved)
    }
}
