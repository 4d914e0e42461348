//! Published model configurations.
//!
//! `efficientnet_v2_s` is the exact searched stage table. The m/l variants
//! are derived from it with compound scaling chosen to land near their known
//! sizes (51M / 120M parameters); the original larger variants were searched
//! independently, so these are documented approximations, not reproductions.
//! `efficientnet` builds the classic B0–B7 family by scaling the B0 table.

use super::{block, ArchSpec, BlockOp, BlockSpec, ScalingCoeffs};
use crate::error::{Error, Result};

fn stem(channels: u32) -> BlockSpec {
    block(BlockOp::Conv, 1, 3, 2, channels, 1, 0.0)
}

fn head(channels: u32) -> BlockSpec {
    block(BlockOp::Head, 1, 1, 1, channels, 1, 0.0)
}

/// EfficientNetV2-S: three fused early stages, three MBConv late stages.
pub fn efficientnet_v2_s(num_classes: u32) -> ArchSpec {
    ArchSpec {
        stem: stem(24),
        stages: vec![
            block(BlockOp::FusedMbConv, 1, 3, 1, 24, 2, 0.0),
            block(BlockOp::FusedMbConv, 4, 3, 2, 48, 4, 0.0),
            block(BlockOp::FusedMbConv, 4, 3, 2, 64, 4, 0.0),
            block(BlockOp::MbConv, 4, 3, 2, 128, 6, 0.25),
            block(BlockOp::MbConv, 6, 3, 1, 160, 9, 0.25),
            block(BlockOp::MbConv, 6, 3, 2, 256, 15, 0.25),
        ],
        head: head(1280),
        num_classes,
        default_image_size: 384,
    }
}

/// Scaled-up approximation of the medium variant (~51M parameters).
pub fn efficientnet_v2_m(num_classes: u32) -> ArchSpec {
    efficientnet_v2_s(num_classes)
        .scaled(&ScalingCoeffs::new(1.2, 1.4, 480).with_extra_layers(vec![0, 0, 0, 0, 3, 5]))
        .expect("static preset scales cleanly")
}

/// Scaled-up approximation of the large variant (~120M parameters).
pub fn efficientnet_v2_l(num_classes: u32) -> ArchSpec {
    efficientnet_v2_s(num_classes)
        .scaled(&ScalingCoeffs::new(1.5, 2.0, 480).with_extra_layers(vec![0, 0, 0, 0, 5, 10]))
        .expect("static preset scales cleanly")
}

/// Desk-scale member of the same family: fused early stages, SE'd late
/// stages, but narrow and shallow enough (~0.1M parameters at 10 classes)
/// to train on a CPU. This is the default backbone for small-data runs and
/// architecture-search demos, not a published configuration.
pub fn tiny(num_classes: u32) -> ArchSpec {
    ArchSpec {
        stem: stem(8),
        stages: vec![
            block(BlockOp::FusedMbConv, 1, 3, 1, 8, 1, 0.0),
            block(BlockOp::FusedMbConv, 4, 3, 2, 16, 2, 0.0),
            block(BlockOp::MbConv, 4, 3, 2, 32, 2, 0.25),
            block(BlockOp::MbConv, 6, 3, 2, 48, 2, 0.25),
        ],
        head: head(128),
        num_classes,
        default_image_size: 160,
    }
}

/// EfficientNet compound-scaling variant.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum V1Variant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
}

impl V1Variant {
    /// `(width_mult, depth_mult, resolution)` for each variant.
    pub fn coefficients(self) -> (f64, f64, u32) {
        match self {
            V1Variant::B0 => (1.0, 1.0, 224),
            V1Variant::B1 => (1.0, 1.1, 240),
            V1Variant::B2 => (1.1, 1.2, 260),
            V1Variant::B3 => (1.2, 1.4, 300),
            V1Variant::B4 => (1.4, 1.8, 380),
            V1Variant::B5 => (1.6, 2.2, 456),
            V1Variant::B6 => (1.8, 2.6, 528),
            V1Variant::B7 => (2.0, 3.1, 600),
        }
    }
}

/// The EfficientNet-B0 stage table (all MBConv, SE 0.25 throughout).
fn efficientnet_b0(num_classes: u32) -> ArchSpec {
    ArchSpec {
        stem: stem(32),
        stages: vec![
            block(BlockOp::MbConv, 1, 3, 1, 16, 1, 0.25),
            block(BlockOp::MbConv, 6, 3, 2, 24, 2, 0.25),
            block(BlockOp::MbConv, 6, 5, 2, 40, 2, 0.25),
            block(BlockOp::MbConv, 6, 3, 2, 80, 3, 0.25),
            block(BlockOp::MbConv, 6, 5, 1, 112, 3, 0.25),
            block(BlockOp::MbConv, 6, 5, 2, 192, 4, 0.25),
            block(BlockOp::MbConv, 6, 3, 1, 320, 1, 0.25),
        ],
        head: head(1280),
        num_classes,
        default_image_size: 224,
    }
}

/// Build any B0–B7 model by compound-scaling the B0 table.
pub fn efficientnet(variant: V1Variant, num_classes: u32) -> ArchSpec {
    let (w, d, r) = variant.coefficients();
    efficientnet_b0(num_classes)
        .scaled(&ScalingCoeffs::new(w, d, r))
        .expect("static preset scales cleanly")
}

/// Names accepted by [`preset`].
pub fn preset_names() -> Vec<&'static str> {
    vec![
        "v2-s", "v2-m", "v2-l", "tiny", "b0", "b1", "b2", "b3", "b4", "b5", "b6", "b7",
        "b4-fused1-3", "b4-fused1-5", "b4-fused1-7",
    ]
}

/// Look up a named preset. The `b4-fused1-K` variants replace the first K
/// stages of B4 with fused blocks, the progression used to study where fused
/// blocks pay off.
pub fn preset(name: &str, num_classes: u32) -> Result<ArchSpec> {
    let v1 = |v| Ok(efficientnet(v, num_classes));
    match name {
        "v2-s" => Ok(efficientnet_v2_s(num_classes)),
        "v2-m" => Ok(efficientnet_v2_m(num_classes)),
        "v2-l" => Ok(efficientnet_v2_l(num_classes)),
        "tiny" => Ok(tiny(num_classes)),
        "b0" => v1(V1Variant::B0),
        "b1" => v1(V1Variant::B1),
        "b2" => v1(V1Variant::B2),
        "b3" => v1(V1Variant::B3),
        "b4" => v1(V1Variant::B4),
        "b5" => v1(V1Variant::B5),
        "b6" => v1(V1Variant::B6),
        "b7" => v1(V1Variant::B7),
        "b4-fused1-3" => efficientnet(V1Variant::B4, num_classes).with_fused_stages(&[0, 1, 2]),
        "b4-fused1-5" => efficientnet(V1Variant::B4, num_classes).with_fused_stages(&[0, 1, 2, 3, 4]),
        "b4-fused1-7" => efficientnet(V1Variant::B4, num_classes).with_fused_stages(&[0, 1, 2, 3, 4, 5, 6]),
        other => Err(Error::arg("preset", format!("unknown preset '{other}' (known: {})", preset_names().join(", ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v2_s_stage_table_is_exact() {
        let a = efficientnet_v2_s(1000);
        assert_eq!(a.stem.out_channels, 24);
        assert_eq!(a.stem.stride, 2);
        let want: Vec<(BlockOp, u32, u32, u32, u32, u32, f64)> = vec![
            (BlockOp::FusedMbConv, 1, 3, 1, 24, 2, 0.0),
            (BlockOp::FusedMbConv, 4, 3, 2, 48, 4, 0.0),
            (BlockOp::FusedMbConv, 4, 3, 2, 64, 4, 0.0),
            (BlockOp::MbConv, 4, 3, 2, 128, 6, 0.25),
            (BlockOp::MbConv, 6, 3, 1, 160, 9, 0.25),
            (BlockOp::MbConv, 6, 3, 2, 256, 15, 0.25),
        ];
        assert_eq!(a.stages.len(), want.len());
        for (s, w) in a.stages.iter().zip(&want) {
            assert_eq!((s.op_type, s.expansion_ratio, s.kernel, s.stride, s.out_channels, s.num_layers, s.se_ratio), *w);
        }
        assert_eq!(a.head.out_channels, 1280);
        a.validate().unwrap();
    }

    #[test]
    fn b_family_channel_progression() {
        let b0 = efficientnet(V1Variant::B0, 1000);
        assert_eq!(b0.stem.out_channels, 32);
        assert_eq!(b0.stages.iter().map(|s| s.out_channels).collect::<Vec<_>>(), vec![16, 24, 40, 80, 112, 192, 320]);
        let b4 = efficientnet(V1Variant::B4, 1000);
        // width 1.4: 32->48 stem, 16->24, 24->32, 40->56, 80->112, 112->160, 192->272, 320->448.
        assert_eq!(b4.stem.out_channels, 48);
        assert_eq!(b4.stages.iter().map(|s| s.out_channels).collect::<Vec<_>>(), vec![24, 32, 56, 112, 160, 272, 448]);
        // depth 1.8: [1,2,2,3,3,4,1] -> [2,4,4,6,6,8,2].
        assert_eq!(b4.stages.iter().map(|s| s.num_layers).collect::<Vec<_>>(), vec![2, 4, 4, 6, 6, 8, 2]);
        assert_eq!(b4.head.out_channels, 1792);
        assert_eq!(b4.default_image_size, 380);
        // b7 asks for 600 and is capped.
        assert_eq!(efficientnet(V1Variant::B7, 1000).default_image_size, 480);
    }

    #[test]
    fn tiny_is_desk_sized() {
        let a = tiny(10);
        let params = crate::arch::count_params(&a).unwrap().total_params;
        assert!(params < 1_000_000, "tiny preset has {params} parameters");
        assert!(params > 50_000, "tiny preset has {params} parameters");
    }

    #[test]
    fn all_presets_validate() {
        for name in preset_names() {
            preset(name, 1000).unwrap().validate().unwrap();
        }
        assert!(preset("b9", 1000).is_err());
    }
}
