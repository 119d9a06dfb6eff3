//! Declarative network description, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{DetLayout, LossWeights};
use crate::nn::NormConfig;

/// Overall stride of the high-resolution branch and of the shared feature.
pub const FEATURE_STRIDE: usize = 8;
/// Overall stride of the deepest low-resolution stage.
pub const SEMANTIC_STRIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Detection,
    Segmentation,
    Depth,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Detection, TaskKind::Segmentation, TaskKind::Depth];

    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::Detection => "det",
            TaskKind::Segmentation => "seg",
            TaskKind::Depth => "dep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSize {
    pub height: usize,
    pub width: usize,
}

impl InputSize {
    pub fn new(height: usize, width: usize) -> Self {
        InputSize { height, width }
    }

    /// Parses `HxW` (also accepts `×`).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("input size `{s}` is not of the form HxW"));
        let (h, w) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
        Ok(InputSize {
            height: h.trim().parse().map_err(|_| bad())?,
            width: w.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for InputSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Ablation switches. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_high_branch: bool,
    pub use_aggregation: bool,
    pub use_channel_attention: bool,
    pub use_spatial_attention: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_high_branch: true,
            use_aggregation: true,
            use_channel_attention: true,
            use_spatial_attention: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TagConfig {
    /// Bottleneck width of the channel-attention MLP.
    pub hidden: usize,
    /// Dilation of the spatial-attention conv.
    pub dilation: usize,
    /// Emit one spatial map per feature channel instead of a single map.
    pub beta_full_channels: bool,
}

impl Default for TagConfig {
    fn default() -> Self {
        TagConfig {
            hidden: 256,
            dilation: 2,
            beta_full_channels: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub channels: usize,
    /// Number of stacked 3×3-ReLU-1×1 blocks.
    pub blocks: usize,
    /// Final bilinear factor for the dense tasks.
    pub upsample: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            channels: 256,
            blocks: 2,
            upsample: FEATURE_STRIDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input: InputSize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Low-branch widths of layers 1 to 5.
    pub layer_channels: [usize; 5],
    pub high_channels: usize,
    /// Residual blocks in layer 1 and in each high-branch layer.
    pub residual_blocks: usize,
    /// Plain conv-norm-act layers after the strided conv in layers 2 to 5.
    pub plain_convs: usize,
    pub toggles: Toggles,
    pub tag: TagConfig,
    pub head: HeadConfig,
    pub tasks: Vec<TaskKind>,
    pub seg_classes: usize,
    pub detection: DetLayout,
    pub norm: NormConfig,
    pub loss_weights: LossWeights,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input: InputSize::new(1024, 2048),
            in_channels: 3,
            stem_channels: 64,
            layer_channels: [64, 128, 256, 512, 1024],
            high_channels: 128,
            residual_blocks: 2,
            plain_convs: 3,
            toggles: Toggles::default(),
            tag: TagConfig::default(),
            head: HeadConfig::default(),
            tasks: TaskKind::ALL.to_vec(),
            seg_classes: 19,
            detection: DetLayout::default(),
            norm: NormConfig::default(),
            loss_weights: LossWeights::default(),
        }
    }
}

impl BackboneConfig {
    /// Parses and validates. Errors carry serde's line/column and field name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BackboneConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A narrow variant with the same topology, for fast tests.
    pub fn slim(input: InputSize) -> Self {
        BackboneConfig {
            input,
            stem_channels: 4,
            layer_channels: [4, 8, 16, 32, 64],
            high_channels: 8,
            tag: TagConfig {
                hidden: 8,
                ..TagConfig::default()
            },
            head: HeadConfig {
                channels: 16,
                ..HeadConfig::default()
            },
            ..BackboneConfig::default()
        }
    }

    /// Channels of the shared feature `h` (the finest aggregated scale).
    pub fn feature_channels(&self) -> usize {
        self.layer_channels[2]
    }

    pub fn task_channels(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Detection => self.detection.channels(),
            TaskKind::Segmentation => self.seg_classes,
            TaskKind::Depth => 1,
        }
    }

    pub fn task_index(&self, kind: TaskKind) -> Option<usize> {
        self.tasks.iter().position(|&k| k == kind)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let widths = [self.in_channels, self.stem_channels, self.high_channels, self.residual_blocks]
            .into_iter()
            .chain(self.layer_channels);
        if widths.into_iter().any(|c| c == 0) {
            return bad("channel widths and block counts must be positive".into());
        }
        for i in 2..4 {
            if self.layer_channels[i + 1] != 2 * self.layer_channels[i] {
                return bad(format!(
                    "layer_channels must double across layers 3-5, got {:?}",
                    self.layer_channels
                ));
            }
        }
        if self.tag.hidden == 0 || self.tag.dilation == 0 {
            return bad("tag.hidden and tag.dilation must be positive".into());
        }
        if self.head.channels == 0 || self.head.blocks == 0 || self.head.upsample == 0 {
            return bad("head.channels, head.blocks and head.upsample must be positive".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return bad(format!("duplicate task in {:?}", self.tasks));
        }
        if self.seg_classes < 2 || self.detection.classes == 0 || self.detection.yaw_bins == 0 {
            return bad("seg_classes ≥ 2 and positive detection classes/yaw_bins required".into());
        }
        self.loss_weights.validate()?;
        self.validate_input(self.input)
    }

    /// Input extents must survive six exact halvings and leave layer 5 at
    /// least 1×2.
    pub fn validate_input(&self, input: InputSize) -> Result<()> {
        let InputSize { height, width } = input;
        if height % FEATURE_STRIDE != 0 || width % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!("input {input} is not divisible by {FEATURE_STRIDE}")));
        }
        if height < 64 || width < 128 {
            return Err(Error::Config(format!("input {input} is below the minimum 64x128")));
        }
        if height % SEMANTIC_STRIDE != 0 || width % SEMANTIC_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input {input} must be divisible by {SEMANTIC_STRIDE} so every low-branch stage halves exactly"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let cfg = BackboneConfig::default();
        assert_eq!(BackboneConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(BackboneConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.feature_channels(), 256);
        assert_eq!(cfg.task_channels(TaskKind::Detection), 40);
    }

    #[test]
    fn unknown_field_names_field_and_line() {
        let err = BackboneConfig::from_json("{\n  \"stem_chanels\": 64\n}").unwrap_err().to_string();
        assert!(err.contains("stem_chanels") && err.contains("line 2"), "{err}");
        let err = BackboneConfig::from_json("{\"toggles\": {\"use_agg\": false}}").unwrap_err().to_string();
        assert!(err.contains("use_agg"), "{err}");
    }

    #[test]
    fn input_validation() {
        let cfg = BackboneConfig::default();
        assert!(cfg.validate_input(InputSize::new(64, 128)).is_ok());
        assert!(cfg.validate_input(InputSize::new(128, 256)).is_ok());
        assert!(cfg.validate_input(InputSize::new(60, 128)).unwrap_err().to_string().contains("divisible by 8"));
        assert!(cfg.validate_input(InputSize::new(32, 128)).unwrap_err().to_string().contains("minimum"));
        assert!(cfg.validate_input(InputSize::new(72, 128)).is_err());
    }

    #[test]
    fn parse_size() {
        assert_eq!(InputSize::parse("64x128").unwrap(), InputSize::new(64, 128));
        assert_eq!(InputSize::parse("1024×2048").unwrap(), InputSize::new(1024, 2048));
        assert!(InputSize::parse("64").is_err());
    }

    #[test]
    fn rejects_duplicate_tasks() {
        let err = BackboneConfig::from_json(r#"{"tasks": ["depth", "depth"]}"#).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
