use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Duration,
    Pitch,
    Mel,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Duration, ModelKind::Pitch, ModelKind::Mel];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Duration => "duration",
            ModelKind::Pitch => "pitch",
            ModelKind::Mel => "mel",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "duration" => Ok(ModelKind::Duration),
            "pitch" => Ok(ModelKind::Pitch),
            "mel" => Ok(ModelKind::Mel),
            other => Err(Error::ConfigInvalid(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of an architecture table.
///
/// A residual block holds `sub_blocks` sub-blocks and a projected skip
/// connection. A plain block is `sub_blocks` sub-blocks in sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub name: String,
    pub sub_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dropout: f64,
    #[serde(default)]
    pub residual: bool,
}

impl BlockConfig {
    fn plain(name: &str, sub_blocks: usize, channels: usize, kernel: usize, dropout: f64) -> Self {
        Self { name: name.into(), sub_blocks, channels, kernel, dropout, residual: false }
    }

    fn residual(name: &str, channels: usize, kernel: usize) -> Self {
        Self { name: name.into(), sub_blocks: 5, channels, kernel, dropout: 0.1, residual: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub blocks: Vec<BlockConfig>,
    /// Output width of the final 1x1 convolution.
    pub head_channels: usize,
    #[serde(default)]
    pub pitch_conditioning: bool,
    /// Multiplies every hidden width, including the embedding.
    #[serde(default = "unit_scale")]
    pub channel_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

/// Trunk shared by the duration and pitch networks.
fn small_trunk() -> Vec<BlockConfig> {
    let mut blocks = vec![BlockConfig::plain("conv1", 3, 256, 3, 0.1)];
    for (i, k) in [5, 7, 9, 11, 13].into_iter().enumerate() {
        blocks.push(BlockConfig::residual(&format!("b{}", i + 1), 256, k));
    }
    blocks.push(BlockConfig::plain("conv2", 1, 512, 1, 0.1));
    blocks
}

impl ModelConfig {
    /// Number of duration classes of the optional classification head.
    pub const DURATION_CLASSES: usize = 32;

    pub fn duration() -> Self {
        Self { kind: ModelKind::Duration, embed_dim: 64, blocks: small_trunk(), head_channels: 1, pitch_conditioning: false, channel_scale: 1.0 }
    }

    /// Duration network with a 32-way classification head instead of regression.
    pub fn duration_classifier() -> Self {
        Self { head_channels: Self::DURATION_CLASSES, ..Self::duration() }
    }

    /// Voiced logit and normalised pitch.
    pub fn pitch() -> Self {
        Self { kind: ModelKind::Pitch, head_channels: 2, ..Self::duration() }
    }

    pub fn mel() -> Self {
        let mut blocks = vec![BlockConfig::plain("conv1", 3, 256, 3, 0.1)];
        for (i, k) in [5, 7, 9, 13, 15, 17].into_iter().enumerate() {
            blocks.push(BlockConfig::residual(&format!("b{}", i + 1), 256, k));
        }
        for (i, k) in [21, 23, 25].into_iter().enumerate() {
            blocks.push(BlockConfig::residual(&format!("b{}", i + 7), 512, k));
        }
        blocks.push(BlockConfig::plain("conv2", 1, 1024, 1, 0.1));
        Self { kind: ModelKind::Mel, embed_dim: 256, blocks, head_channels: 80, pitch_conditioning: true, channel_scale: 1.0 }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Duration => Self::duration(),
            ModelKind::Pitch => Self::pitch(),
            ModelKind::Mel => Self::mel(),
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.channel_scale = scale;
        self
    }

    pub fn without_dropout(mut self) -> Self {
        for b in &mut self.blocks {
            b.dropout = 0.0;
        }
        self
    }

    /// Hidden width after scaling; never below one channel.
    pub fn width(&self, channels: usize) -> usize {
        ((channels as f64 * self.channel_scale).round() as usize).max(1)
    }

    pub fn embed_width(&self) -> usize {
        self.width(self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.channel_scale > 0.0 && self.channel_scale.is_finite()) {
            return bad(format!("channel_scale {} must be positive", self.channel_scale));
        }
        if self.embed_dim == 0 || self.head_channels == 0 {
            return bad("embed_dim and head_channels must be positive".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        let expected_head = match self.kind {
            ModelKind::Duration if self.head_channels == Self::DURATION_CLASSES => Self::DURATION_CLASSES,
            ModelKind::Duration => 1,
            ModelKind::Pitch => 2,
            ModelKind::Mel => 80,
        };
        if self.head_channels != expected_head {
            return bad(format!("{} network needs {expected_head} output channels, got {}", self.kind, self.head_channels));
        }
        if self.pitch_conditioning != (self.kind == ModelKind::Mel) {
            return bad("pitch conditioning applies to the mel network only".into());
        }
        for b in &self.blocks {
            if b.sub_blocks == 0 || b.channels == 0 {
                return bad(format!("block {} is empty", b.name));
            }
            if b.kernel % 2 == 0 {
                return bad(format!("block {} has even kernel {}", b.name, b.kernel));
            }
            if !(0.0..1.0).contains(&b.dropout) {
                return bad(format!("block {} dropout {} outside [0, 1)", b.name, b.dropout));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
