//! Architecture specifications: stage tables, compound scaling, presets,
//! closed-form parameter and FLOP counting, and instantiation into trainable
//! models.
//!
//! An [`ArchSpec`] is a stem convolution, a list of stages (each repeating
//! one block type), and a classification head. Stage strides apply to the
//! first block of the stage; channel changes likewise happen in the first
//! block, so later repeats have matching in/out channels and carry residual
//! connections.

mod cost;
mod model;
mod presets;

pub use cost::{count_flops, count_params, estimate_train_memory, CostReport, StageCost};
pub use model::{ForwardConfig, ForwardPass, Model, Param};
pub use presets::{efficientnet, efficientnet_v2_l, efficientnet_v2_m, efficientnet_v2_s, preset, preset_names, V1Variant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kind of block a stage repeats.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum BlockOp {
    /// Plain convolution + BN + SiLU (stem only).
    Conv,
    /// Inverted bottleneck: 1x1 expand, depthwise kxk, squeeze-excite,
    /// 1x1 project.
    MbConv,
    /// Fused variant: a single kxk convolution does expansion and spatial
    /// mixing, followed by a 1x1 project (collapsed entirely when the
    /// expansion ratio is 1). No squeeze-excite.
    FusedMbConv,
    /// Classification head: 1x1 conv, pool, dropout, fully connected.
    Head,
}

/// One stage: `num_layers` repeats of a block. The stride and the change to
/// `out_channels` apply to the first repeat only.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub op_type: BlockOp,
    pub expansion_ratio: u32,
    pub kernel: u32,
    pub stride: u32,
    pub out_channels: u32,
    pub num_layers: u32,
    /// Squeeze-excite width as a fraction of the block's input channels;
    /// 0 disables the module.
    pub se_ratio: f64,
}

/// A complete network: stem, backbone stages, head.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub stem: BlockSpec,
    pub stages: Vec<BlockSpec>,
    pub head: BlockSpec,
    pub num_classes: u32,
    /// Inference resolution; training may run smaller under a progressive
    /// schedule.
    pub default_image_size: u32,
}

/// Compound-scaling factors applied by [`ArchSpec::scaled`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingCoeffs {
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Requested inference resolution for the scaled model; hard-capped at
    /// [`MAX_IMAGE_SIZE`].
    pub image_size: u32,
    /// Extra layers appended per stage after depth scaling, used to deepen
    /// late stages faster than uniform depth scaling would.
    pub extra_layers: Vec<u32>,
}

/// Largest resolution a scaled spec will request; larger asks are clamped.
pub const MAX_IMAGE_SIZE: u32 = 480;

/// Round `x` to the nearest multiple of 8 (half away from zero), never below 8.
/// All channel counts in scaled architectures go through this.
pub fn round_channels(x: f64) -> u32 {
    let r = ((x / 8.0 + 0.5).floor() * 8.0) as u32;
    r.max(8)
}

impl ScalingCoeffs {
    pub fn new(width_mult: f64, depth_mult: f64, image_size: u32) -> Self {
        ScalingCoeffs { width_mult, depth_mult, image_size, extra_layers: Vec::new() }
    }

    pub fn with_extra_layers(mut self, extra: Vec<u32>) -> Self {
        self.extra_layers = extra;
        self
    }
}

impl BlockSpec {
    fn validate(&self, idx: &str, issues: &mut Vec<String>) {
        match self.op_type {
            BlockOp::Conv | BlockOp::Head => {}
            BlockOp::MbConv | BlockOp::FusedMbConv => {
                if !matches!(self.expansion_ratio, 1 | 4 | 6) {
                    issues.push(format!("{idx}: expansion ratio {} not in {{1, 4, 6}}", self.expansion_ratio));
                }
            }
        }
        if !matches!(self.kernel, 1 | 3 | 5) {
            issues.push(format!("{idx}: kernel {} not in {{1, 3, 5}}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) {
            issues.push(format!("{idx}: stride {} not in {{1, 2}}", self.stride));
        }
        if self.out_channels == 0 {
            issues.push(format!("{idx}: zero output channels"));
        }
        if self.num_layers == 0 {
            issues.push(format!("{idx}: zero layers"));
        }
        if !(0.0..=1.0).contains(&self.se_ratio) {
            issues.push(format!("{idx}: se_ratio {} outside [0, 1]", self.se_ratio));
        }
    }
}

impl ArchSpec {
    /// Check structural constraints, reporting every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.stem.op_type != BlockOp::Conv {
            issues.push("stem must be a plain conv block".to_string());
        }
        self.stem.validate("stem", &mut issues);
        if self.stages.is_empty() {
            issues.push("architecture has no stages".to_string());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !matches!(s.op_type, BlockOp::MbConv | BlockOp::FusedMbConv) {
                issues.push(format!("stage {i}: op must be mb_conv or fused_mb_conv"));
            }
            s.validate(&format!("stage {i}"), &mut issues);
        }
        if self.head.op_type != BlockOp::Head {
            issues.push("head block must have op_type head".to_string());
        }
        self.head.validate("head", &mut issues);
        if self.num_classes < 2 {
            issues.push(format!("num_classes {} < 2", self.num_classes));
        }
        if self.default_image_size < 32 {
            issues.push(format!("default_image_size {} < 32", self.default_image_size));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArch(issues.join("; ")))
        }
    }

    /// Apply compound scaling: widths through [`round_channels`], depths
    /// through `ceil`, plus optional per-stage extra layers; the requested
    /// image size is clamped to [`MAX_IMAGE_SIZE`]. Identity coefficients
    /// return the spec unchanged.
    pub fn scaled(&self, c: &ScalingCoeffs) -> Result<ArchSpec> {
        if c.width_mult <= 0.0 || c.depth_mult <= 0.0 {
            return Err(Error::arg("scale", format!("non-positive multiplier {}/{}", c.width_mult, c.depth_mult)));
        }
        if !c.extra_layers.is_empty() && c.extra_layers.len() != self.stages.len() {
            return Err(Error::arg(
                "scale",
                format!("{} extra-layer entries for {} stages", c.extra_layers.len(), self.stages.len()),
            ));
        }
        let mut out = self.clone();
        out.stem.out_channels = round_channels(self.stem.out_channels as f64 * c.width_mult);
        out.head.out_channels = round_channels(self.head.out_channels as f64 * c.width_mult);
        for (i, s) in out.stages.iter_mut().enumerate() {
            s.out_channels = round_channels(s.out_channels as f64 * c.width_mult);
            s.num_layers = (s.num_layers as f64 * c.depth_mult).ceil() as u32
                + c.extra_layers.get(i).copied().unwrap_or(0);
        }
        out.default_image_size = c.image_size.min(MAX_IMAGE_SIZE);
        out.validate()?;
        Ok(out)
    }

    /// Replace the blocks of the given stages with their fused variant
    /// (dropping squeeze-excite, which the fused block does not carry).
    pub fn with_fused_stages(&self, stages: &[usize]) -> Result<ArchSpec> {
        let mut out = self.clone();
        for &i in stages {
            let Some(s) = out.stages.get_mut(i) else {
                return Err(Error::arg(
                    "fuse_stages",
                    format!("stage index {i} out of range for {} stages", self.stages.len()),
                ));
            };
            s.op_type = BlockOp::FusedMbConv;
            s.se_ratio = 0.0;
        }
        Ok(out)
    }

    /// Total block count across all stages.
    pub fn total_layers(&self) -> u32 {
        self.stages.iter().map(|s| s.num_layers).sum()
    }

    /// Serialize to pretty JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse and validate a spec from JSON. Unknown fields are rejected.
    pub fn from_json(s: &str) -> Result<ArchSpec> {
        let arch: ArchSpec = serde_json::from_str(s)?;
        arch.validate()?;
        Ok(arch)
    }
}

/// Shorthand used by the preset tables.
pub(crate) fn block(op_type: BlockOp, expansion_ratio: u32, kernel: u32, stride: u32, out_channels: u32, num_layers: u32, se_ratio: f64) -> BlockSpec {
    BlockSpec { op_type, expansion_ratio, kernel, stride, out_channels, num_layers, se_ratio }
}
