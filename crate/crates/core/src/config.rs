//! Architecture and training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::loss::LossWeights;

/// Which architectural blocks are active. `ssm = false` feeds `f2` straight
/// through as `f3`; `gim = false` passes `f3` through as the graph feature;
/// `leader = false` keeps leader nodes for the final mix but drops the
/// delivery into the next loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleToggles {
    pub ssm: bool,
    pub gim: bool,
    pub leader: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self {
            ssm: true,
            gim: true,
            leader: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · max(0, 1 − lr_decay · epoch)`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f32,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f32,
    pub lr_schedule: LrSchedule,
    /// Per-epoch slope of the linear schedule.
    pub lr_decay: f32,
    pub batch: usize,
    pub epochs: usize,
    pub crop: usize,
    /// Grid spacing between crop origins.
    pub stride: usize,
    /// Stop after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    /// Print a log line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 2e-4,
            lr_schedule: LrSchedule::Constant,
            lr_decay: 2e-4,
            batch: 2,
            epochs: 100,
            crop: 64,
            stride: 8,
            max_steps: None,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Backbone width C.
    pub channels: usize,
    /// Graph node width.
    pub node_channels: usize,
    /// Bottleneck ratio of the channel attention.
    pub reduction: usize,
    /// Nodes per graph (N).
    pub nodes: usize,
    /// Graph loops (L).
    pub loops: usize,
    pub modules: ModuleToggles,
    /// Use one set of edge convolutions for every loop.
    pub share_edge_params: bool,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            node_channels: 16,
            reduction: 4,
            nodes: 3,
            loops: 3,
            modules: ModuleToggles::default(),
            share_edge_params: false,
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

const DOC_KEY: &str = "_doc";

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.node_channels == 0 {
            return fail("channel widths must be positive".into());
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return fail(format!(
                "channels ({}) must be divisible by reduction ({})",
                self.channels, self.reduction
            ));
        }
        if self.nodes == 0 || self.loops == 0 {
            return fail(format!("nodes ({}) and loops ({}) must be >= 1", self.nodes, self.loops));
        }
        let LossWeights { alpha, beta, .. } = self.loss;
        if !(alpha >= 0.0 && beta >= 0.0) {
            return fail(format!("loss weights must be >= 0 (alpha {alpha}, beta {beta})"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || o.lr_decay < 0.0 {
            return fail("lr must be positive and decay terms non-negative".into());
        }
        if o.batch == 0 || o.crop == 0 || o.stride == 0 {
            return fail("batch, crop and stride must be positive".into());
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove(DOC_KEY);
        }
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Pretty JSON with a leading `_doc` object describing every key.
    pub fn to_documented_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        let doc = json!({
            "channels": "backbone feature width C",
            "node_channels": "graph node width",
            "reduction": "channel-attention bottleneck ratio; channels must be divisible by it",
            "nodes": "nodes per graph N; pyramid grids 1, 2, 4, ... capped at the input size",
            "loops": "graph loops L",
            "modules.ssm": "structure salience module on/off",
            "modules.gim": "graph interaction module on/off",
            "modules.leader": "leader-node delivery between loops on/off",
            "share_edge_params": "reuse one set of edge convolutions in every loop",
            "loss.alpha": "edge loss weight",
            "loss.beta": "SSIM loss weight",
            "loss.edge_norm": "l1 (mean absolute error) or l1_squared",
            "optim.lr": "Adam learning rate",
            "optim.weight_decay": "decoupled weight decay",
            "optim.lr_schedule": "constant or linear",
            "optim.lr_decay": "per-epoch slope of the linear schedule",
            "optim.batch": "crops per optimizer step",
            "optim.epochs": "passes over all crops",
            "optim.crop": "square crop size in pixels",
            "optim.stride": "spacing of the crop-origin grid",
            "optim.max_steps": "optional hard cap on optimizer steps",
            "optim.log_every": "log interval in steps; 0 disables",
            "seed": "seed for parameter initialisation and crop shuffling",
        });
        let mut out = serde_json::Map::new();
        out.insert(DOC_KEY.into(), doc);
        if let Value::Object(fields) = value.take() {
            out.extend(fields);
        }
        Ok(serde_json::to_string_pretty(&Value::Object(out))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let c = FusionConfig::default();
        assert_eq!((c.nodes, c.loops), (3, 3));
        assert_eq!((c.loss.alpha, c.loss.beta), (10.0, 0.5));
        assert_eq!(c.optim.lr, 1e-3);
        assert_eq!(c.optim.weight_decay, 2e-4);
        assert_eq!((c.optim.batch, c.optim.epochs), (2, 100));
        assert_eq!((c.optim.crop, c.optim.stride), (64, 8));
        c.validate().unwrap();
    }

    #[test]
    fn documented_json_round_trips() {
        let c = FusionConfig::default();
        let text = c.to_documented_json().unwrap();
        assert!(text.contains("\"_doc\""));
        assert_eq!(FusionConfig::from_json_str(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(FusionConfig::from_json_str(r#"{"chanels": 8}"#).is_err());
        assert!(FusionConfig::from_json_str(r#"{"optim": {"learning_rate": 1}}"#).is_err());
        let partial = FusionConfig::from_json_str(r#"{"channels": 8, "optim": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.channels, 8);
        assert_eq!(partial.optim.epochs, 3);
        assert_eq!(partial.optim.lr, 1e-3);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = FusionConfig {
            reduction: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.reduction = 4;
        c.nodes = 0;
        assert!(c.validate().is_err());
        c.nodes = 3;
        c.loss.alpha = -1.0;
        assert!(c.validate().is_err());
    }
}
