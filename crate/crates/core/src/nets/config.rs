//! Architecture configurations and the preset table.
//!
//! | preset          | input     | widths                          | other                              |
//! |-----------------|-----------|---------------------------------|------------------------------------|
//! | DRN / PAPER     | 1×400×400 | stem 16, stages 16-32-64-128-256-512, blocks 1-1-2-2-2-2 | dilations 1-1-1-1-2-4 |
//! | DRN / DESK      | 1×64×64   | stem 4, stages 4-8-16-16, blocks 1-1-1-1 | dilations 1-1-2-4          |
//! | MixNet / PAPER  | 1×400×400 | MixNet-M table ×1.3 (stem 24, head 1536) | kernels 3-5-7-9            |
//! | MixNet / DESK   | 1×64×64   | stem 4, stages 8-16-16, head 32 | kernels 3-5-7-9                    |
//! | Segmenter / PAPER | 1×400×400 | encoder 32-64-128-256, JPU 4×64, attention 16 | SE reduction 16    |
//! | Segmenter / DESK  | 1×64×64 | encoder 4-8-16-32, JPU 4×8, attention 4 | SE reduction 4           |
//!
//! DRN stages use stride 2 at every dilation-1 stage after the first and
//! stride 1 once dilation takes over, so the deep stages keep resolution.

use serde::{Deserialize, Serialize};

use crate::error::{PecadError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Arch {
    Drn,
    Mixnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scale {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorSpec {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(PecadError::Config(format!(
                "tensor spec dimensions must be positive: {channels}x{height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn image(size: usize) -> Self {
        Self {
            channels: 1,
            height: size,
            width: size,
        }
    }
}

/// One inverted-bottleneck stage of the MixNet classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixStage {
    pub channels: usize,
    pub expansion: usize,
    pub stride: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: Arch,
    pub scale: Scale,
    pub input: TensorSpec,
    pub width_multiplier: f64,
    pub stem_channels: usize,
    /// DRN: per-stage output widths (before the multiplier).
    #[serde(default)]
    pub stage_channels: Vec<usize>,
    /// DRN: residual blocks per stage.
    #[serde(default)]
    pub stage_blocks: Vec<usize>,
    /// DRN: dilation per stage.
    #[serde(default)]
    pub dilation_schedule: Vec<usize>,
    /// MixNet: stage table.
    #[serde(default)]
    pub mix_stages: Vec<MixStage>,
    #[serde(default)]
    pub head_channels: usize,
    /// MixNet: kernel size per channel group of every mixed depthwise conv.
    #[serde(default)]
    pub kernel_size_groups: Vec<usize>,
}

impl ClassifierConfig {
    pub fn preset(arch: Arch, scale: Scale) -> Self {
        match (arch, scale) {
            (Arch::Drn, Scale::Paper) => Self {
                arch,
                scale,
                input: TensorSpec::image(400),
                width_multiplier: 1.0,
                stem_channels: 16,
                stage_channels: vec![16, 32, 64, 128, 256, 512],
                stage_blocks: vec![1, 1, 2, 2, 2, 2],
                dilation_schedule: vec![1, 1, 1, 1, 2, 4],
                mix_stages: vec![],
                head_channels: 0,
                kernel_size_groups: vec![],
            },
            (Arch::Drn, Scale::Desk) => Self {
                arch,
                scale,
                input: TensorSpec::image(64),
                width_multiplier: 1.0,
                stem_channels: 8,
                stage_channels: vec![8, 16, 32, 32],
                stage_blocks: vec![1, 1, 1, 1],
                dilation_schedule: vec![1, 1, 2, 4],
                mix_stages: vec![],
                head_channels: 0,
                kernel_size_groups: vec![],
            },
            (Arch::Mixnet, Scale::Paper) => Self {
                arch,
                scale,
                input: TensorSpec::image(400),
                width_multiplier: 1.3,
                stem_channels: 24,
                stage_channels: vec![],
                stage_blocks: vec![],
                dilation_schedule: vec![],
                mix_stages: vec![
                    MixStage { channels: 24, expansion: 1, stride: 1, blocks: 1 },
                    MixStage { channels: 32, expansion: 6, stride: 2, blocks: 2 },
                    MixStage { channels: 40, expansion: 6, stride: 2, blocks: 4 },
                    MixStage { channels: 80, expansion: 6, stride: 2, blocks: 4 },
                    MixStage { channels: 120, expansion: 3, stride: 1, blocks: 4 },
                    MixStage { channels: 200, expansion: 6, stride: 2, blocks: 4 },
                ],
                head_channels: 1536,
                kernel_size_groups: vec![3, 5, 7, 9],
            },
            (Arch::Mixnet, Scale::Desk) => Self {
                arch,
                scale,
                input: TensorSpec::image(64),
                width_multiplier: 1.0,
                stem_channels: 8,
                stage_channels: vec![],
                stage_blocks: vec![],
                dilation_schedule: vec![],
                mix_stages: vec![
                    MixStage { channels: 16, expansion: 2, stride: 2, blocks: 1 },
                    MixStage { channels: 32, expansion: 2, stride: 2, blocks: 1 },
                    MixStage { channels: 32, expansion: 2, stride: 1, blocks: 1 },
                ],
                head_channels: 64,
                kernel_size_groups: vec![3, 5, 7, 9],
            },
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input = TensorSpec::image(size);
        self
    }

    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        TensorSpec::new(self.input.channels, self.input.height, self.input.width)?;
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(PecadError::Config("width_multiplier must be positive".into()));
        }
        if self.stem_channels == 0 {
            return Err(PecadError::Config("stem_channels must be positive".into()));
        }
        match self.arch {
            Arch::Drn => {
                let n = self.dilation_schedule.len();
                if n == 0 || self.stage_channels.len() != n || self.stage_blocks.len() != n {
                    return Err(PecadError::Config(
                        "DRN stage_channels, stage_blocks and dilation_schedule must be non-empty and equally long".into(),
                    ));
                }
                if self.dilation_schedule.contains(&0) || self.stage_blocks.contains(&0) {
                    return Err(PecadError::Config("DRN dilations and block counts must be >= 1".into()));
                }
            }
            Arch::Mixnet => {
                if self.mix_stages.is_empty() || self.head_channels == 0 {
                    return Err(PecadError::Config("MixNet needs stages and head channels".into()));
                }
                if self.kernel_size_groups.is_empty() {
                    return Err(PecadError::Config("MixNet needs kernel_size_groups".into()));
                }
                if let Some(k) = self.kernel_size_groups.iter().find(|k| *k % 2 == 0) {
                    return Err(PecadError::Config(format!("kernel size {k} is even")));
                }
                if self
                    .mix_stages
                    .iter()
                    .any(|s| s.expansion == 0 || s.blocks == 0 || s.stride == 0 || s.channels == 0)
                {
                    return Err(PecadError::Config("MixNet stage fields must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// DRN per-stage strides derived from the dilation schedule.
    pub fn drn_strides(&self) -> Vec<usize> {
        self.dilation_schedule
            .iter()
            .enumerate()
            .map(|(i, &d)| if i > 0 && d == 1 { 2 } else { 1 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub scale: Scale,
    pub input: TensorSpec,
    /// Widths of Down1..Down4.
    pub encoder_channels: [usize; 4],
    pub jpu_dilations: Vec<usize>,
    pub jpu_width: usize,
    pub attention_layers: usize,
    pub attention_width: usize,
    pub se_reduction: usize,
}

impl SegmenterConfig {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Paper => Self {
                scale,
                input: TensorSpec::image(400),
                encoder_channels: [32, 64, 128, 256],
                jpu_dilations: vec![1, 2, 4, 8],
                jpu_width: 64,
                attention_layers: 4,
                attention_width: 16,
                se_reduction: 16,
            },
            Scale::Desk => Self {
                scale,
                input: TensorSpec::image(64),
                encoder_channels: [4, 8, 16, 32],
                jpu_dilations: vec![1, 2, 4, 8],
                jpu_width: 8,
                attention_layers: 4,
                attention_width: 4,
                se_reduction: 4,
            },
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input = TensorSpec::image(size);
        self
    }

    pub fn validate(&self) -> Result<()> {
        TensorSpec::new(self.input.channels, self.input.height, self.input.width)?;
        if self.encoder_channels.contains(&0) || self.jpu_width == 0 || self.attention_width == 0 {
            return Err(PecadError::Config("segmenter widths must be positive".into()));
        }
        if self.jpu_dilations.is_empty() || self.jpu_dilations.contains(&0) {
            return Err(PecadError::Config("jpu_dilations must be non-empty and >= 1".into()));
        }
        if self.attention_layers < 2 {
            return Err(PecadError::Config("attention_layers must be >= 2".into()));
        }
        if let Some(c) = self.encoder_channels.iter().find(|&&c| c < self.se_reduction) {
            return Err(PecadError::Config(format!(
                "se_reduction {} exceeds encoder width {c}",
                self.se_reduction
            )));
        }
        if self.se_reduction == 0 {
            return Err(PecadError::Config("se_reduction must be positive".into()));
        }
        check_divisible(self.input.height, self.input.width)
    }
}

/// Four stride-2 stages put Down4 at 1/16 resolution.
pub const SEGMENTER_DIVISOR: usize = 16;

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % SEGMENTER_DIVISOR != 0 || w % SEGMENTER_DIVISOR != 0 || h == 0 || w == 0 {
        return Err(PecadError::Shape(format!(
            "segmenter input {h}x{w} is not divisible by {SEGMENTER_DIVISOR}"
        )));
    }
    Ok(())
}
