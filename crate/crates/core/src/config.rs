//! Run configuration, loaded from JSON. Unknown keys are rejected at every
//! nesting level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::importance::{DmLossConfig, ScoreModelSpec};
use crate::model::{ModelShape, Redundancy};
use crate::rollout::SyntheticModelSpec;
use crate::rope::RopeSpec;

/// Environment variable consulted by the CLI when `--config` is omitted.
pub const CONFIG_ENV: &str = "FOCUSED_KV_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetParams {
    pub b_min: u32,
    pub b_max: u32,
    pub gamma: f64,
}

impl Default for BudgetParams {
    fn default() -> Self {
        Self {
            b_min: 4,
            b_max: 12,
            gamma: 2.0,
        }
    }
}

impl BudgetParams {
    pub fn validate(&self) -> Result<()> {
        if self.b_min > self.b_max {
            return Err(config_err(format!("b_min {} exceeds b_max {}", self.b_min, self.b_max)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(config_err(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    #[serde(default)]
    pub redundancy: Redundancy,
}

/// Temporal rotary settings. `temporal_blocks: None` means every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    #[serde(default)]
    pub temporal_blocks: Option<Vec<usize>>,
    #[serde(default = "default_rope_base")]
    pub base: f64,
    #[serde(default)]
    pub frequencies: Option<Vec<f64>>,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            temporal_blocks: None,
            base: default_rope_base(),
            frequencies: None,
        }
    }
}

impl RopeConfig {
    pub fn build(&self, head_dim: usize) -> Result<RopeSpec> {
        let blocks = self
            .temporal_blocks
            .clone()
            .unwrap_or_else(|| (0..head_dim / 2).collect());
        match &self.frequencies {
            Some(freqs) => RopeSpec::new(head_dim, blocks, freqs.clone()),
            None => RopeSpec::with_base(head_dim, blocks, self.base),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub shape: ModelShape,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Token groups per frame used for pooled attention scores (P).
    pub groups: usize,
    #[serde(default)]
    pub budget: BudgetParams,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub score_model: ScoreModelSpec,
    #[serde(default)]
    pub stream: StreamSpec,
    /// Frame indices that become anchors when cached.
    #[serde(default = "default_anchors")]
    pub anchors: Vec<usize>,
    #[serde(default)]
    pub rope: RopeConfig,
    /// Score attention on rotated (true) or pre-rotation (false) Q/K.
    #[serde(default = "default_true")]
    pub score_on_rotated: bool,
    #[serde(default)]
    pub model: SyntheticModelSpec,
    #[serde(default)]
    pub dm_loss: DmLossConfig,
    /// Prompt identifiers for head-importance estimation.
    #[serde(default = "default_prompts")]
    pub prompts: Vec<u64>,
    /// Chunks per masked rollout during importance estimation.
    #[serde(default = "default_importance_chunks")]
    pub importance_chunks: usize,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_anchors() -> Vec<usize> {
    vec![0]
}
fn default_true() -> bool {
    true
}
fn default_prompts() -> Vec<u64> {
    vec![0, 1]
}
fn default_importance_chunks() -> usize {
    2
}

impl RunConfig {
    /// A small configuration suitable for tests and quick CLI runs.
    pub fn desk_default() -> Self {
        Self {
            shape: ModelShape {
                num_layers: 2,
                heads_per_layer: 4,
                head_dim: 8,
                tokens_per_frame: 8,
                chunk_frames: 3,
                dense_window: 21,
            },
            lambda: default_lambda(),
            groups: 4,
            budget: BudgetParams::default(),
            epsilon: default_epsilon(),
            seed: 0,
            score_model: ScoreModelSpec::default(),
            stream: StreamSpec::default(),
            anchors: default_anchors(),
            rope: RopeConfig::default(),
            score_on_rotated: true,
            model: SyntheticModelSpec::default(),
            dm_loss: DmLossConfig::default(),
            prompts: default_prompts(),
            importance_chunks: default_importance_chunks(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.groups == 0 || self.groups > self.shape.tokens_per_frame {
            return Err(config_err(format!(
                "groups must lie in [1, tokens_per_frame={}], got {}",
                self.shape.tokens_per_frame, self.groups
            )));
        }
        self.budget.validate()?;
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(config_err("epsilon must be > 0"));
        }
        self.rope.build(self.shape.head_dim)?;
        self.model.validate(&self.shape)?;
        self.dm_loss.validate()?;
        if self.importance_chunks == 0 {
            return Err(config_err("importance_chunks must be >= 1"));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn rope_spec(&self) -> Result<RopeSpec> {
        self.rope.build(self.shape.head_dim)
    }
}
