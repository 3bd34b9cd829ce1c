use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::moe::{Allocation, MoeConfig, RoutingInput};
use crate::net::{BackboneConfig, BlockRef};
use crate::pretrain::PretrainConfig;
use crate::synth::Split;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Label carried into reports.
    pub name: String,
    /// Corpus manifest; the built-in standard corpus when absent.
    pub corpus: Option<PathBuf>,
    pub backbone: BackboneConfig,
    /// Pretraining checkpoint; pretrained inline for `pretrain_epochs` when absent.
    pub pretrained: Option<PathBuf>,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_scenes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the summed balance losses.
    pub lambda: f64,
    /// Mixture layers; a plain backbone when absent.
    pub moe: Option<MoeConfig>,
    /// Blocks that receive a mixture layer; final block of every stage when absent.
    pub placement: Option<Vec<BlockRef>>,
    pub embed_dim: usize,
    pub tau: f64,
    pub seed: u64,
    pub eval_split: Split,
    pub finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let backbone = BackboneConfig {
            voxel_size: 0.08,
            ..BackboneConfig::default()
        };
        Self {
            name: "doremi".into(),
            corpus: None,
            backbone,
            pretrained: None,
            pretrain_epochs: 6,
            epochs: 30,
            batch_scenes: 1,
            lr: 2e-3,
            weight_decay: 0.01,
            lambda: 0.001,
            moe: Some(MoeConfig::default()),
            placement: None,
            embed_dim: 32,
            tau: 0.07,
            seed: 0,
            eval_split: Split::Eval,
            finetune_epochs: 10,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, TrainError> {
        toml::to_string_pretty(self).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.backbone.validate().map_err(TrainError::Config)?;
        if !(self.lambda >= 0.0) {
            return Err(TrainError::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.batch_scenes == 0 || !(self.lr > 0.0) || !(self.tau > 0.0) || self.embed_dim == 0 {
            return Err(TrainError::Config("batch_scenes, lr, tau and embed_dim must be positive".into()));
        }
        if let Some(m) = &self.moe {
            m.allocation.validate(m.experts)?;
        }
        for b in self.placement() {
            if b.stage >= self.backbone.stages() || b.block >= self.backbone.blocks[b.stage] {
                return Err(TrainError::Config(format!("placement {b:?} outside the backbone")));
            }
        }
        Ok(())
    }

    pub fn placement(&self) -> Vec<BlockRef> {
        match &self.placement {
            Some(p) => p.clone(),
            None => self.backbone.final_blocks(),
        }
    }

    pub fn experts(&self) -> usize {
        self.moe.as_ref().map_or(8, |m| m.experts)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            backbone: self.backbone.clone(),
            epochs: self.pretrain_epochs,
            ..PretrainConfig::default()
        }
    }
}

/// Model variants compared in the ablation and balance studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pretrained backbone, plain FFNs.
    Baseline,
    /// Frozen representation expert plus a token-routed bank, two experts per token.
    Re,
    /// As `Re`, routed on the spatial, domain-shifted input.
    ReDsr,
    /// As `ReDsr` with entropy-controlled allocation.
    Full,
    /// As `Full` with two experts per token and no balance loss.
    Native,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::Baseline, Variant::Re, Variant::ReDsr, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Re => "re",
            Variant::ReDsr => "re-dsr",
            Variant::Full => "full",
            Variant::Native => "native",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let k = base.experts();
        let moe = |allocation, routing| MoeConfig {
            experts: k,
            allocation,
            routing,
            use_re: true,
        };
        let mut cfg = base.clone();
        cfg.name = self.name().into();
        cfg.moe = match self {
            Variant::Baseline => None,
            Variant::Re => Some(moe(Allocation::Fixed { k: 2 }, RoutingInput::Token)),
            Variant::ReDsr => Some(moe(Allocation::Fixed { k: 2 }, RoutingInput::DomainSpatial)),
            Variant::Full => Some(moe(Allocation::Entropy { k_min: 1, k_max: k }, RoutingInput::DomainSpatial)),
            Variant::Native => Some(moe(Allocation::Fixed { k: 2 }, RoutingInput::DomainSpatial)),
        };
        if self == Variant::Native {
            cfg.lambda = 0.0;
        }
        cfg
    }
}

/// The four ablation rows derived from one base config.
pub fn ablation_grid(base: &TrainConfig) -> Vec<(Variant, TrainConfig)> {
    Variant::ABLATION.iter().map(|&v| (v, v.apply(base))).collect()
}
