//! Closed-form parameter and FLOP counting.
//!
//! Conventions, fixed across the whole crate:
//!
//! - FLOPs are multiply-accumulates (MACs). A `k x k` convolution producing
//!   `(cout, h', w')` from `cin` channels costs `h' * w' * cout * cin * k^2`;
//!   depthwise divides by `cin`. Elementwise activations, the pooled mean,
//!   and the squeeze-excite rescale cost one per element; fully connected
//!   layers cost `in * out` plus `out` for the bias.
//! - Batch norm folds into the preceding convolution at inference, so it
//!   contributes parameters (gamma and beta, `2c`; running stats are state,
//!   not parameters) but no FLOPs.
//! - Convolutions carry no bias. Squeeze-excite and head FC layers do.
//! - In an MBConv block the 1x1 expansion runs at the input resolution; the
//!   depthwise convolution applies the stride, so everything after it runs
//!   at the output resolution. The squeeze width is derived from the block's
//!   *input* channels: `max(1, round(cin * se_ratio))`.

use serde::Serialize;

use super::{ArchSpec, BlockOp, BlockSpec};
use crate::error::{Error, Result};

/// Cost of one named stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageCost {
    pub stage: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-stage and total cost of an architecture at a given resolution.
#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub image_size: u32,
    pub per_stage: Vec<StageCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

/// Parameter count (and FLOPs at the spec's default resolution).
pub fn count_params(arch: &ArchSpec) -> Result<CostReport> {
    analyze(arch, arch.default_image_size)
}

/// FLOPs (as MACs) for one forward pass at `image_size`, plus parameters.
pub fn count_flops(arch: &ArchSpec, image_size: u32) -> Result<CostReport> {
    if image_size < 32 {
        return Err(Error::arg("count_flops", format!("image size {image_size} < 32")));
    }
    analyze(arch, image_size)
}

/// Squeeze-excite hidden width for a block with `cin` input channels.
pub fn se_width(cin: u64, se_ratio: f64) -> u64 {
    ((cin as f64 * se_ratio).round() as u64).max(1)
}

fn analyze(arch: &ArchSpec, image_size: u32) -> Result<CostReport> {
    arch.validate()?;
    let mut per_stage = Vec::new();

    // Stem: 3x3 stride-2 conv from RGB + BN + SiLU.
    let stem_c = arch.stem.out_channels as u64;
    let mut h = (image_size as u64).div_ceil(2);
    let mut w = h;
    per_stage.push(StageCost {
        stage: "stem".to_string(),
        params: 3 * stem_c * 9 + 2 * stem_c,
        flops: h * w * 3 * stem_c * 9 + h * w * stem_c,
    });

    let mut cin = stem_c;
    for (i, s) in arch.stages.iter().enumerate() {
        let mut params = 0;
        let mut flops = 0;
        for layer in 0..s.num_layers {
            let stride = if layer == 0 { s.stride as u64 } else { 1 };
            let ci = if layer == 0 { cin } else { s.out_channels as u64 };
            let (p, f, nh, nw) = block_cost(s, ci, h, w, stride);
            params += p;
            flops += f;
            h = nh;
            w = nw;
        }
        cin = s.out_channels as u64;
        per_stage.push(StageCost { stage: format!("stage{}", i + 1), params, flops });
    }

    // Head: 1x1 conv + BN + SiLU, global pool, FC. Dropout is free.
    let head_c = arch.head.out_channels as u64;
    let ncls = arch.num_classes as u64;
    per_stage.push(StageCost {
        stage: "head".to_string(),
        params: cin * head_c + 2 * head_c + head_c * ncls + ncls,
        flops: h * w * cin * head_c + h * w * head_c + h * w * head_c + head_c * ncls + ncls,
    });

    let total_params = per_stage.iter().map(|s| s.params).sum();
    let total_flops = per_stage.iter().map(|s| s.flops).sum();
    Ok(CostReport { image_size, per_stage, total_params, total_flops })
}

/// Cost of a single block instance with `cin` input channels at `(h, w)`.
/// Returns `(params, flops, out_h, out_w)`.
fn block_cost(s: &BlockSpec, cin: u64, h: u64, w: u64, stride: u64) -> (u64, u64, u64, u64) {
    let cout = s.out_channels as u64;
    let e = s.expansion_ratio as u64;
    let k = s.kernel as u64;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let ce = cin * e;
    let mut p = 0;
    let mut f = 0;

    match s.op_type {
        BlockOp::MbConv => {
            if e != 1 {
                p += cin * ce + 2 * ce;
                f += h * w * cin * ce; // 1x1 expand at input resolution
                f += h * w * ce; // silu
            }
            p += ce * k * k + 2 * ce;
            f += ho * wo * ce * k * k; // depthwise applies the stride
            f += ho * wo * ce; // silu
            if s.se_ratio > 0.0 {
                let se = se_width(cin, s.se_ratio);
                p += ce * se + se + se * ce + ce; // two FCs with biases
                f += ho * wo * ce; // squeeze (pool)
                f += ce * se + se + se; // fc1 + bias + silu
                f += se * ce + ce + ce; // fc2 + bias + sigmoid
                f += ho * wo * ce; // excite (rescale)
            }
            p += ce * cout + 2 * cout;
            f += ho * wo * ce * cout; // 1x1 project
        }
        BlockOp::FusedMbConv => {
            if e == 1 {
                // Collapses to a single kxk conv + BN + SiLU.
                p += cin * cout * k * k + 2 * cout;
                f += ho * wo * cin * cout * k * k + ho * wo * cout;
            } else {
                p += cin * ce * k * k + 2 * ce;
                f += ho * wo * cin * ce * k * k + ho * wo * ce;
                p += ce * cout + 2 * cout;
                f += ho * wo * ce * cout;
            }
        }
        BlockOp::Conv | BlockOp::Head => unreachable!("stage ops are validated"),
    }
    (p, f, ho, wo)
}

/// Rough bytes needed to train `arch` at `image_size` with the given batch:
/// activations (with gradients and saved normalization context) plus five
/// parameter-sized buffers (weights, gradients, two optimizer slots, EMA).
/// Intentionally generous; used as a pre-check before instantiating search
/// candidates.
pub fn estimate_train_memory(arch: &ArchSpec, image_size: u32, batch: usize, dtype_bytes: usize) -> Result<u64> {
    let report = analyze(arch, image_size)?;
    let mut elems: u64 = 0;
    let mut h = (image_size as u64).div_ceil(2);
    let mut w = h;
    elems += h * w * arch.stem.out_channels as u64 * 2;
    let mut cin = arch.stem.out_channels as u64;
    for s in arch.stages.iter() {
        for layer in 0..s.num_layers {
            let stride = if layer == 0 { s.stride as u64 } else { 1 };
            let ci = if layer == 0 { cin } else { s.out_channels as u64 };
            let ce = ci * s.expansion_ratio as u64;
            let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
            // expanded maps dominate: count expansion output twice (value at
            // input and output resolution) plus the projection output.
            elems += h * w * ce + ho * wo * ce * 2 + ho * wo * s.out_channels as u64;
            h = ho;
            w = wo;
        }
        cin = s.out_channels as u64;
    }
    elems += h * w * arch.head.out_channels as u64 * 2;
    let activation = elems * batch as u64 * 3; // value + gradient + slack
    let params = report.total_params * 5;
    Ok((activation + params) * dtype_bytes as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{efficientnet, efficientnet_v2_s, preset, V1Variant};

    // Expected values computed once with an independent per-layer walker
    // (straight transcription of the counting conventions above) and frozen.
    #[test]
    fn frozen_totals_for_reference_models() {
        let cases: Vec<(&str, u32, u64, u64)> = vec![
            ("b0", 224, 5_288_548, 396_667_744),
            ("b4", 380, 19_341_616, 4_477_856_936),
            ("b6", 528, 43_040_704, 19_356_607_464),
            ("b7", 600, 66_347_960, 38_252_117_224),
            ("v2-s", 384, 21_458_488, 8_416_864_984),
            ("v2-s", 300, 21_458_488, 5_340_453_496),
            ("b4-fused1-3", 380, 20_945_870, 9_693_354_052),
            ("b4-fused1-5", 380, 43_528_144, 23_023_890_152),
            ("b4-fused1-7", 380, 132_121_624, 36_065_644_280),
        ];
        for (name, img, params, flops) in cases {
            let arch = preset(name, 1000).unwrap();
            let r = count_flops(&arch, img).unwrap();
            assert_eq!(r.total_params, params, "{name} params");
            assert_eq!(r.total_flops, flops, "{name} flops@{img}");
        }
    }

    #[test]
    fn totals_equal_stage_sums() {
        for name in ["v2-s", "b0", "b4-fused1-5"] {
            let r = count_flops(&preset(name, 1000).unwrap(), 224).unwrap();
            assert_eq!(r.total_params, r.per_stage.iter().map(|s| s.params).sum::<u64>());
            assert_eq!(r.total_flops, r.per_stage.iter().map(|s| s.flops).sum::<u64>());
            assert_eq!(r.per_stage.first().unwrap().stage, "stem");
            assert_eq!(r.per_stage.last().unwrap().stage, "head");
        }
    }

    #[test]
    fn params_are_resolution_independent_and_flops_scale() {
        let arch = efficientnet_v2_s(1000);
        let a = count_flops(&arch, 384).unwrap();
        let b = count_flops(&arch, 768).unwrap();
        assert_eq!(a.total_params, b.total_params);
        // Doubling resolution quadruples conv FLOPs up to boundary effects.
        let ratio = b.total_flops as f64 / a.total_flops as f64;
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
        assert!(count_flops(&arch, 16).is_err());
    }

    #[test]
    fn head_count_tracks_num_classes() {
        let a = count_params(&efficientnet(V1Variant::B0, 10)).unwrap();
        let b = count_params(&efficientnet(V1Variant::B0, 1000)).unwrap();
        assert_eq!(b.total_params - a.total_params, 1281 * 990); // (1280 + 1) per extra class
    }

    #[test]
    fn se_width_rounds_and_floors_at_one() {
        assert_eq!(se_width(24, 0.25), 6);
        assert_eq!(se_width(112, 0.25), 28);
        assert_eq!(se_width(2, 0.25), 1);
        assert_eq!(se_width(1, 0.25), 1);
        assert_eq!(se_width(10, 0.25), 3); // 2.5 rounds half away from zero
    }

    #[test]
    fn memory_estimate_grows_with_size_and_batch() {
        let arch = efficientnet_v2_s(10);
        let a = estimate_train_memory(&arch, 64, 8, 4).unwrap();
        let b = estimate_train_memory(&arch, 128, 8, 4).unwrap();
        let c = estimate_train_memory(&arch, 64, 16, 4).unwrap();
        assert!(b > a);
        assert!(c > a);
    }
}
