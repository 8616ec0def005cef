//! TOML training configuration: one key per training-recipe field, grouped
//! into `[backbone]`, `[loss]`, and `[train]` tables. Every key is required;
//! a missing key fails with serde's error naming the field.

use std::fs;
use std::path::Path;

use adp_core::backbone::BackboneConfig;
use adp_core::dpc::DpcConfig;
use adp_core::trainer::{AdmUpdate, Strategy, TrainConfig};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub stride: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub triplet_margin: f64,
    pub angular_margin: f64,
    pub angular_scale: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// one of: adm, background, random_erase, none
    pub strategy: String,
    pub dual_path: bool,
    /// one of: after, before
    pub adm_update: String,
    pub base_lr: f64,
    pub momentum: f64,
    pub adm_lr_multiplier: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub epochs: usize,
    pub pad: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

/// On-disk shape of a full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub backbone: BackboneSection,
    pub loss: LossSection,
    pub train: TrainSection,
}

impl ConfigFile {
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        Self {
            backbone: BackboneSection {
                image_h: cfg.backbone.image_h,
                image_w: cfg.backbone.image_w,
                patch: cfg.backbone.patch,
                stride: cfg.backbone.stride,
                blocks: cfg.backbone.blocks,
                heads: cfg.backbone.heads,
                dim: cfg.backbone.dim,
                mlp_ratio: cfg.backbone.mlp_ratio,
                ln_eps: cfg.backbone.ln_eps,
            },
            loss: LossSection {
                triplet_margin: cfg.loss.triplet_margin,
                angular_margin: cfg.loss.angular_margin,
                angular_scale: cfg.loss.angular_scale,
                lambda: cfg.loss.lambda,
            },
            train: TrainSection {
                strategy: cfg.strategy.name().to_string(),
                dual_path: cfg.dual_path,
                adm_update: match cfg.adm_update {
                    AdmUpdate::After => "after".to_string(),
                    AdmUpdate::Before => "before".to_string(),
                },
                base_lr: cfg.base_lr,
                momentum: cfg.momentum,
                adm_lr_multiplier: cfg.adm_lr_multiplier,
                batch_p: cfg.batch_p,
                batch_k: cfg.batch_k,
                epochs: cfg.epochs,
                pad: cfg.pad,
                flip_prob: cfg.flip_prob,
                seed: cfg.seed,
            },
        }
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            backbone: BackboneConfig {
                image_h: self.backbone.image_h,
                image_w: self.backbone.image_w,
                patch: self.backbone.patch,
                stride: self.backbone.stride,
                blocks: self.backbone.blocks,
                heads: self.backbone.heads,
                dim: self.backbone.dim,
                mlp_ratio: self.backbone.mlp_ratio,
                ln_eps: self.backbone.ln_eps,
            },
            loss: DpcConfig {
                triplet_margin: self.loss.triplet_margin,
                angular_margin: self.loss.angular_margin,
                angular_scale: self.loss.angular_scale,
                lambda: self.loss.lambda,
            },
            strategy: Strategy::from_name(&self.train.strategy)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            dual_path: self.train.dual_path,
            adm_update: match self.train.adm_update.as_str() {
                "after" => AdmUpdate::After,
                "before" => AdmUpdate::Before,
                other => anyhow::bail!(
                    "unknown adm_update '{other}' (expected 'after' or 'before')"
                ),
            },
            base_lr: self.train.base_lr,
            momentum: self.train.momentum,
            adm_lr_multiplier: self.train.adm_lr_multiplier,
            batch_p: self.train.batch_p,
            batch_k: self.train.batch_k,
            epochs: self.train.epochs,
            pad: self.train.pad,
            flip_prob: self.train.flip_prob,
            seed: self.train.seed,
        };
        cfg.validate().map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        Ok(cfg)
    }
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let file: ConfigFile = toml::from_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))?;
    file.to_train_config()
}

pub fn save(path: &Path, cfg: &TrainConfig) -> Result<()> {
    let file = ConfigFile::from_train_config(cfg);
    let text = toml::to_string_pretty(&file)?;
    fs::write(path, text)
        .with_context(|| format!("cannot write config {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_config() {
        let cfg = TrainConfig::desk(7);
        let file = ConfigFile::from_train_config(&cfg);
        let text = toml::to_string_pretty(&file).unwrap();
        let back: ConfigFile = toml::from_str(&text).unwrap();
        assert_eq!(back.to_train_config().unwrap(), cfg);
    }

    #[test]
    fn missing_key_error_names_the_key() {
        let cfg = TrainConfig::desk(0);
        let file = ConfigFile::from_train_config(&cfg);
        let full = toml::to_string_pretty(&file).unwrap();
        let without = full.replace("base_lr = 0.004\n", "");
        let err = toml::from_str::<ConfigFile>(&without).unwrap_err().to_string();
        assert!(err.contains("base_lr"), "error should name the key: {err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let cfg = TrainConfig::desk(0);
        let full = toml::to_string_pretty(&ConfigFile::from_train_config(&cfg)).unwrap();
        let with_extra = full.replace("[loss]", "[loss]\nwarmup = 3");
        let err = toml::from_str::<ConfigFile>(&with_extra).unwrap_err().to_string();
        assert!(err.contains("warmup"), "error should name the stray key: {err}");
    }
}
