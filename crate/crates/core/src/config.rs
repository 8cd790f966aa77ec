//! TOML run configuration.
//!
//! Sections: `[data]`, `[model]`, `[pretrain]`, `[finetune]`, `[ssl]`, plus
//! top-level `seed` and `out_dir`. Every field has a default, so an empty
//! file is a complete desk-scale configuration; unknown keys anywhere are
//! hard errors naming the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mae::MaeConfig;
use crate::phantom::{DatasetCounts, Family, PhantomSpec};
use crate::ssl::SslConfig;
use crate::train::{
    EngineConfig, DEFAULT_BATCH, DEFAULT_CKPT_EVERY, DEFAULT_FINETUNE_STEPS,
    DEFAULT_PRETRAIN_STEPS, FINETUNE_LR, LLRD_FACTOR, PRETRAIN_LR,
};
use crate::vit::VitConfig;
use crate::{Error, Result};

/// CT window bounds applied before normalization.
pub const HU_LO: f64 = -500.0;
pub const HU_HI: f64 = 500.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory (under the output root) receiving generated volumes.
    pub out_dir: String,
    /// Cubic volume edge in voxels.
    pub edge: usize,
    pub spacing_mm: f64,
    pub family: String,
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
    pub n_fractures: usize,
    pub gap_width_mm: f64,
    pub noise_sigma: f64,
    pub bone_hu: f64,
    pub background_hu: f64,
    pub hu_lo: f64,
    pub hu_hi: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            out_dir: "data".into(),
            edge: 64,
            spacing_mm: 1.0,
            family: "tibia-like".into(),
            labeled: 5,
            unlabeled: 8,
            val: 2,
            test: 4,
            n_fractures: 2,
            gap_width_mm: 2.0,
            noise_sigma: 20.0,
            bone_hu: 400.0,
            background_hu: 0.0,
            hu_lo: HU_LO,
            hu_hi: HU_HI,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub taps: Vec<usize>,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub dec_mlp_ratio: usize,
    pub mask_ratio: f64,
    pub per_patch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mae = MaeConfig::default();
        ModelConfig {
            patch_size: 16,
            embed_dim: 192,
            depth: 12,
            heads: 4,
            mlp_ratio: 4,
            taps: vec![3, 6, 9, 12],
            dec_dim: mae.dec_dim,
            dec_depth: mae.dec_depth,
            dec_heads: mae.dec_heads,
            dec_mlp_ratio: mae.dec_mlp_ratio,
            mask_ratio: mae.mask_ratio,
            per_patch_norm: mae.per_patch_norm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub ckpt_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: DEFAULT_PRETRAIN_STEPS,
            batch_size: DEFAULT_BATCH,
            base_lr: PRETRAIN_LR,
            min_lr: 0.0,
            ckpt_every: DEFAULT_CKPT_EVERY,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    /// Layer-wise LR decay fraction in (0, 1]; 1.0 disables the decay.
    pub llrd_factor: f64,
    pub ckpt_every: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: DEFAULT_FINETUNE_STEPS,
            batch_size: DEFAULT_BATCH,
            base_lr: FINETUNE_LR,
            min_lr: 0.0,
            llrd_factor: LLRD_FACTOR,
            ckpt_every: DEFAULT_CKPT_EVERY,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SslSection {
    pub sup_steps: u64,
    pub semi_steps: u64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub ema_decay: f64,
    pub lambda: f64,
    pub ckpt_every: u64,
}

impl Default for SslSection {
    fn default() -> Self {
        let d = SslConfig::defaults(0);
        SslSection {
            sup_steps: d.sup_steps,
            semi_steps: d.semi_steps,
            base_lr: d.lr0,
            min_lr: d.lr_min,
            ema_decay: d.ema_decay,
            lambda: d.lambda,
            ckpt_every: d.ckpt_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed; commands require one here or via --seed.
    pub seed: Option<u64>,
    /// Output root for run artifacts (checkpoints, curves, reports).
    pub out_dir: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ssl: SslSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(raw).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.edge == 0 || d.edge % self.model.patch_size != 0 {
            return Err(Error::Config(format!(
                "data.edge ({}) must be a positive multiple of model.patch_size ({})",
                d.edge, self.model.patch_size
            )));
        }
        if d.labeled == 0 {
            return Err(Error::Config("data.labeled must be >= 1".into()));
        }
        if !(self.model.mask_ratio > 0.0 && self.model.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "model.mask_ratio ({}) must lie strictly inside (0, 1)",
                self.model.mask_ratio
            )));
        }
        if !(self.finetune.llrd_factor > 0.0 && self.finetune.llrd_factor <= 1.0) {
            return Err(Error::Config(format!(
                "finetune.llrd_factor ({}) outside (0, 1]",
                self.finetune.llrd_factor
            )));
        }
        d.family.parse::<Family>()?;
        self.vit()?.validate()?;
        self.pretrain_engine(0).validate()?;
        self.finetune_engine(0).validate()?;
        self.ssl_config(0).validate()?;
        Ok(())
    }

    pub fn vit(&self) -> Result<VitConfig> {
        let m = &self.model;
        let g = self.data.edge / m.patch_size;
        let cfg = VitConfig {
            patch_size: m.patch_size,
            grid: [g, g, g],
            embed_dim: m.embed_dim,
            depth: m.depth,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            taps: m.taps.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mae_config(&self) -> MaeConfig {
        let m = &self.model;
        MaeConfig {
            mask_ratio: m.mask_ratio,
            dec_dim: m.dec_dim,
            dec_depth: m.dec_depth,
            dec_heads: m.dec_heads,
            dec_mlp_ratio: m.dec_mlp_ratio,
            per_patch_norm: m.per_patch_norm,
        }
    }

    pub fn phantom_spec(&self, seed: u64) -> Result<PhantomSpec> {
        let d = &self.data;
        let spec = PhantomSpec {
            seed,
            shape: [d.edge, d.edge, d.edge],
            spacing: [d.spacing_mm; 3],
            family: d.family.parse()?,
            n_fractures: d.n_fractures,
            gap_width_mm: d.gap_width_mm,
            noise_sigma: d.noise_sigma,
            bone_hu: d.bone_hu,
            background_hu: d.background_hu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn counts(&self) -> DatasetCounts {
        let d = &self.data;
        DatasetCounts { labeled: d.labeled, unlabeled: d.unlabeled, val: d.val, test: d.test }
    }

    pub fn pretrain_engine(&self, seed: u64) -> EngineConfig {
        EngineConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr0: self.pretrain.base_lr,
            lr_min: self.pretrain.min_lr,
            llrd_factor: None,
            seed,
            ckpt_every: self.pretrain.ckpt_every,
            max_steps_per_run: None,
        }
    }

    pub fn finetune_engine(&self, seed: u64) -> EngineConfig {
        EngineConfig {
            steps: self.finetune.steps,
            batch_size: self.finetune.batch_size,
            lr0: self.finetune.base_lr,
            lr_min: self.finetune.min_lr,
            llrd_factor: Some(self.finetune.llrd_factor),
            seed,
            ckpt_every: self.finetune.ckpt_every,
            max_steps_per_run: None,
        }
    }

    pub fn ssl_config(&self, seed: u64) -> SslConfig {
        SslConfig {
            sup_steps: self.ssl.sup_steps,
            semi_steps: self.ssl.semi_steps,
            lr0: self.ssl.base_lr,
            lr_min: self.ssl.min_lr,
            seed,
            ckpt_every: self.ssl.ckpt_every,
            ema_decay: self.ssl.ema_decay,
            lambda: self.ssl.lambda,
            batch_size: DEFAULT_BATCH,
        }
    }
}
