//! Image transforms: bilinear resizing, the reduced RandAugment policy,
//! mixup, cutout, and standardization.
//!
//! Magnitude semantics: RandAugment strength is a single scalar in
//! `[0, 30]`. Each op maps it linearly onto its own range (degrees, shift
//! fraction, enhancement delta, bits removed), so magnitude 0 is an exact
//! identity for every op and 30 is the strongest distortion. Geometric ops
//! resample bilinearly around the image center with zero outside the frame;
//! photometric ops clamp back to `[0, 1]`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::{ChannelStats, ImageBuf};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Upper end of the augmentation magnitude scale.
pub const RANDAUG_MAX_MAGNITUDE: f64 = 30.0;

/// Resize to `target x target` with bilinear interpolation over half-pixel
/// centers. Resizing to the current size is an exact identity; targets below
/// 8 are rejected (the network's stride stack collapses them to nothing).
pub fn resize_bilinear(img: &ImageBuf, target: usize) -> Result<ImageBuf> {
    if target < 8 {
        return Err(Error::arg("resize", format!("target size {target} < 8")));
    }
    if target == img.height && target == img.width {
        return Ok(img.clone());
    }
    let mut out = ImageBuf::zeros(img.channels, target, target);
    let sy = img.height as f32 / target as f32;
    let sx = img.width as f32 / target as f32;
    for c in 0..img.channels {
        for oy in 0..target {
            // Half-pixel centers: dst pixel oy samples src at (oy + .5) * s - .5.
            let fy = (oy as f32 + 0.5) * sy - 0.5;
            let y0 = fy.floor();
            let ty = fy - y0;
            let ya = (y0 as isize).clamp(0, img.height as isize - 1) as usize;
            let yb = (y0 as isize + 1).clamp(0, img.height as isize - 1) as usize;
            for ox in 0..target {
                let fx = (ox as f32 + 0.5) * sx - 0.5;
                let x0 = fx.floor();
                let tx = fx - x0;
                let xa = (x0 as isize).clamp(0, img.width as isize - 1) as usize;
                let xb = (x0 as isize + 1).clamp(0, img.width as isize - 1) as usize;
                let top = img.at(c, ya, xa) * (1.0 - tx) + img.at(c, ya, xb) * tx;
                let bot = img.at(c, yb, xa) * (1.0 - tx) + img.at(c, yb, xb) * tx;
                *out.at_mut(c, oy, ox) = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok(out)
}

/// The reduced augmentation policy: five geometric and three photometric ops.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RandAugOp {
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Brightness,
    Contrast,
    Posterize,
}

impl RandAugOp {
    pub const ALL: [RandAugOp; 8] = [
        RandAugOp::Rotate,
        RandAugOp::TranslateX,
        RandAugOp::TranslateY,
        RandAugOp::ShearX,
        RandAugOp::ShearY,
        RandAugOp::Brightness,
        RandAugOp::Contrast,
        RandAugOp::Posterize,
    ];

    /// Map the shared magnitude onto this op's own scale. Signed ops receive
    /// the sign separately.
    ///
    /// | op          | magnitude 30 means            |
    /// |-------------|-------------------------------|
    /// | rotate      | 30 degrees                    |
    /// | translate   | 0.3 of the image side         |
    /// | shear       | 0.3 shear factor              |
    /// | brightness  | factor 1 +/- 0.9              |
    /// | contrast    | factor 1 +/- 0.9              |
    /// | posterize   | 4 of 8 bits removed           |
    pub fn strength(self, magnitude: f64) -> f64 {
        let f = magnitude / RANDAUG_MAX_MAGNITUDE;
        match self {
            RandAugOp::Rotate => f * 30.0,
            RandAugOp::TranslateX | RandAugOp::TranslateY => f * 0.3,
            RandAugOp::ShearX | RandAugOp::ShearY => f * 0.3,
            RandAugOp::Brightness | RandAugOp::Contrast => f * 0.9,
            RandAugOp::Posterize => (f * 4.0).round(),
        }
    }
}

/// Sample on the inverse affine map `dst -> src` around the image center.
fn warp(img: &ImageBuf, m: [f32; 4], t: [f32; 2]) -> ImageBuf {
    let mut out = ImageBuf::zeros(img.channels, img.height, img.width);
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    for c in 0..img.channels {
        for oy in 0..img.height {
            for ox in 0..img.width {
                let dy = oy as f32 - cy;
                let dx = ox as f32 - cx;
                let sy = m[0] * dy + m[1] * dx + cy + t[0];
                let sx = m[2] * dy + m[3] * dx + cx + t[1];
                // Bilinear gather with zero outside the frame.
                let y0 = sy.floor() as isize;
                let x0 = sx.floor() as isize;
                let ty = sy - y0 as f32;
                let tx = sx - x0 as f32;
                let mut acc = 0.0;
                for (yy, wy) in [(y0, 1.0 - ty), (y0 + 1, ty)] {
                    if yy < 0 || yy >= img.height as isize || wy == 0.0 {
                        continue;
                    }
                    for (xx, wx) in [(x0, 1.0 - tx), (x0 + 1, tx)] {
                        if xx < 0 || xx >= img.width as isize || wx == 0.0 {
                            continue;
                        }
                        acc += img.at(c, yy as usize, xx as usize) * wy * wx;
                    }
                }
                *out.at_mut(c, oy, ox) = acc;
            }
        }
    }
    out
}

fn clamp01(img: &mut ImageBuf) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Apply one op at the given magnitude. `sign` flips direction for the ops
/// where that is meaningful. Zero effective strength returns the input
/// unchanged, bit for bit.
pub fn apply_randaug_op(img: &ImageBuf, op: RandAugOp, sign: f64, magnitude: f64) -> ImageBuf {
    let s = op.strength(magnitude);
    if s == 0.0 {
        return img.clone();
    }
    match op {
        RandAugOp::Rotate => {
            let th = (s * sign).to_radians() as f32;
            // Inverse rotation: src = R(-theta) * dst.
            warp(img, [th.cos(), -th.sin(), th.sin(), th.cos()], [0.0, 0.0])
        }
        RandAugOp::TranslateX => {
            let t = (s * sign) as f32 * img.width as f32;
            warp(img, [1.0, 0.0, 0.0, 1.0], [0.0, -t])
        }
        RandAugOp::TranslateY => {
            let t = (s * sign) as f32 * img.height as f32;
            warp(img, [1.0, 0.0, 0.0, 1.0], [-t, 0.0])
        }
        RandAugOp::ShearX => {
            // Forward x' = x + k*y; inverse x = x' - k*y'.
            warp(img, [1.0, 0.0, -(s * sign) as f32, 1.0], [0.0, 0.0])
        }
        RandAugOp::ShearY => warp(img, [1.0, -(s * sign) as f32, 0.0, 1.0], [0.0, 0.0]),
        RandAugOp::Brightness => {
            let f = (1.0 + s * sign) as f32;
            let mut out = img.clone();
            for v in &mut out.data {
                *v *= f;
            }
            clamp01(&mut out);
            out
        }
        RandAugOp::Contrast => {
            let f = (1.0 + s * sign) as f32;
            let mean = img.data.iter().sum::<f32>() / img.data.len() as f32;
            let mut out = img.clone();
            for v in &mut out.data {
                *v = mean + (*v - mean) * f;
            }
            clamp01(&mut out);
            out
        }
        RandAugOp::Posterize => {
            let keep = 8 - s as u32; // s in 1..=4 here
            let mask = (0xFFu32 << (8 - keep)) as u8 & 0xFF;
            let mut out = img.clone();
            for v in &mut out.data {
                let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8 & mask;
                *v = q as f32 / 255.0;
            }
            out
        }
    }
}

/// Apply `num_ops` uniformly chosen ops in sequence at the shared magnitude.
/// Magnitude 0 short-circuits to an exact identity without consuming
/// randomness.
pub fn randaugment(img: &ImageBuf, magnitude: f64, num_ops: usize, rng: &mut RngStream) -> Result<ImageBuf> {
    if !(0.0..=RANDAUG_MAX_MAGNITUDE).contains(&magnitude) {
        return Err(Error::arg("randaugment", format!("magnitude {magnitude} outside [0, {RANDAUG_MAX_MAGNITUDE}]")));
    }
    if magnitude == 0.0 || num_ops == 0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for _ in 0..num_ops {
        let op = *RandAugOp::ALL.as_slice().choose(rng).expect("non-empty op set");
        let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        out = apply_randaug_op(&out, op, sign, magnitude);
    }
    Ok(out)
}

/// Mixup over a batch: one lambda ~ Beta(alpha, alpha) is drawn per call and
/// every sample i is blended with a permuted partner j as
/// `lambda * x_j + (1 - lambda) * x_i` (labels identically). `alpha == 0`
/// disables blending exactly. Returns the mixed batch, mixed label rows, and
/// the lambda used.
pub fn mixup(
    images: &[ImageBuf],
    labels: &[Vec<f32>],
    alpha: f64,
    rng: &mut RngStream,
) -> Result<(Vec<ImageBuf>, Vec<Vec<f32>>, f64)> {
    if images.len() != labels.len() {
        return Err(Error::shape("mixup", format!("{} images, {} label rows", images.len(), labels.len())));
    }
    if alpha < 0.0 {
        return Err(Error::arg("mixup", format!("alpha {alpha} < 0")));
    }
    if alpha == 0.0 || images.len() < 2 {
        return Ok((images.to_vec(), labels.to_vec(), 0.0));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::arg("mixup", format!("invalid alpha {alpha}: {e}")))?
        .sample(rng);
    let mut perm: Vec<usize> = (0..images.len()).collect();
    perm.shuffle(rng);

    let l = lambda as f32;
    let mixed_images = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let other = &images[perm[i]];
            let data = img.data.iter().zip(&other.data).map(|(&a, &b)| l * b + (1.0 - l) * a).collect();
            ImageBuf { channels: img.channels, height: img.height, width: img.width, data }
        })
        .collect();
    let mixed_labels = labels
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let other = &labels[perm[i]];
            row.iter().zip(other).map(|(&a, &b)| l * b + (1.0 - l) * a).collect()
        })
        .collect();
    Ok((mixed_images, mixed_labels, lambda))
}

/// Zero a `size x size` window centered at a uniformly drawn pixel, clipped
/// to the frame. `size == 0` is an identity; sizes exceeding the image side
/// are rejected.
pub fn cutout(img: &ImageBuf, size: usize, rng: &mut RngStream) -> Result<ImageBuf> {
    if size == 0 {
        return Ok(img.clone());
    }
    if size > img.height || size > img.width {
        return Err(Error::arg(
            "cutout",
            format!("window {size} exceeds {}x{} image", img.height, img.width),
        ));
    }
    let cy = rng.random_range(0..img.height) as isize;
    let cx = rng.random_range(0..img.width) as isize;
    let half = (size / 2) as isize;
    let y0 = (cy - half).max(0) as usize;
    let x0 = (cx - half).max(0) as usize;
    let y1 = ((cy - half) + size as isize).min(img.height as isize) as usize;
    let x1 = ((cx - half) + size as isize).min(img.width as isize) as usize;
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in y0..y1 {
            for x in x0..x1 {
                *out.at_mut(c, y, x) = 0.0;
            }
        }
    }
    Ok(out)
}

/// Per-channel standardization with training-set statistics.
pub fn standardize(img: &ImageBuf, stats: &ChannelStats) -> ImageBuf {
    let mut out = img.clone();
    let plane = img.height * img.width;
    for c in 0..img.channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut out.data[c * plane..(c + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
    out
}

/// One-hot label row.
pub fn one_hot(label: u32, num_classes: u32) -> Vec<f32> {
    let mut row = vec![0.0; num_classes as usize];
    row[label as usize] = 1.0;
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageBuf {
        ImageBuf::from_data(1, h, w, (0..h * w).map(|i| i as f32 / (h * w) as f32).collect()).unwrap()
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let img = gradient_image(16, 16);
        let same = resize_bilinear(&img, 16).unwrap();
        assert_eq!(img, same);
        assert!(resize_bilinear(&img, 7).is_err());
    }

    #[test]
    fn resize_4x_upsample_known_values() {
        // 2x2 image upsampled to 8x8 with half-pixel centers: source pixel
        // centers land at dst 1.5/5.5, so corners clamp to the source values
        // and interior positions blend at eighth-step weights.
        let img = ImageBuf::from_data(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = resize_bilinear(&img, 8).unwrap();
        assert_eq!(up.at(0, 0, 0), 0.0);
        assert_eq!(up.at(0, 0, 7), 1.0);
        assert_eq!(up.at(0, 7, 0), 2.0);
        assert_eq!(up.at(0, 7, 7), 3.0);
        // dst x=2 samples src x at (2.5 * 0.25) - 0.5 = 0.125.
        assert!((up.at(0, 0, 2) - 0.125).abs() < 1e-6);
        assert!((up.at(0, 2, 0) - 0.25).abs() < 1e-6);
        // Mean is preserved by symmetric bilinear weights.
        let mean = up.data.iter().sum::<f32>() / 64.0;
        assert!((mean - 1.5).abs() < 1e-6);
    }

    #[test]
    fn resize_downsample_averages() {
        let img = gradient_image(16, 16);
        let down = resize_bilinear(&img, 8).unwrap();
        assert_eq!(down.height, 8);
        for &v in &down.data {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn randaugment_zero_magnitude_is_exact_identity() {
        let img = gradient_image(12, 12);
        let mut rng = RngStream::derive(1, "aug", &[0]);
        let out = randaugment(&img, 0.0, 2, &mut rng).unwrap();
        assert_eq!(img, out);
        assert!(randaugment(&img, 31.0, 2, &mut rng).is_err());
        assert!(randaugment(&img, -1.0, 2, &mut rng).is_err());
    }

    #[test]
    fn randaugment_is_deterministic_per_stream_and_stays_in_range() {
        let img = gradient_image(12, 12);
        let a = randaugment(&img, 15.0, 2, &mut RngStream::derive(5, "aug", &[3])).unwrap();
        let b = randaugment(&img, 15.0, 2, &mut RngStream::derive(5, "aug", &[3])).unwrap();
        assert_eq!(a, b);
        let c = randaugment(&img, 15.0, 2, &mut RngStream::derive(5, "aug", &[4])).unwrap();
        assert_ne!(a, c);
        for &v in &a.data {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn op_strengths_scale_linearly_with_magnitude() {
        assert_eq!(RandAugOp::Rotate.strength(15.0), 15.0);
        assert_eq!(RandAugOp::Rotate.strength(30.0), 30.0);
        assert!((RandAugOp::TranslateX.strength(10.0) - 0.1).abs() < 1e-12);
        assert!((RandAugOp::Brightness.strength(30.0) - 0.9).abs() < 1e-12);
        assert_eq!(RandAugOp::Posterize.strength(30.0), 4.0);
        assert_eq!(RandAugOp::Posterize.strength(3.0), 0.0); // rounds to no-op
        for op in RandAugOp::ALL {
            assert_eq!(op.strength(0.0), 0.0);
        }
    }

    #[test]
    fn posterize_quantizes_to_expected_levels() {
        let img = gradient_image(1, 64);
        let out = apply_randaug_op(&img, RandAugOp::Posterize, 1.0, 30.0);
        // 4 bits kept: all values are multiples of 16/255.
        for &v in &out.data {
            let q = (v * 255.0).round() as u32;
            assert_eq!(q % 16, 0, "{v}");
        }
    }

    #[test]
    fn rotate_360_equivalent_small_angles_move_mass_sensibly() {
        // A bright pixel at the right edge rotates upward for positive angle.
        let mut img = ImageBuf::zeros(1, 9, 9);
        *img.at_mut(0, 4, 7) = 1.0;
        let out = apply_randaug_op(&img, RandAugOp::Rotate, 1.0, 30.0);
        let top: f32 = (0..4).map(|y| (0..9).map(|x| out.at(0, y, x)).sum::<f32>()).sum();
        let bottom: f32 = (5..9).map(|y| (0..9).map(|x| out.at(0, y, x)).sum::<f32>()).sum();
        assert!(top != bottom, "rotation should break symmetry");
    }

    #[test]
    fn translate_shifts_content() {
        let mut img = ImageBuf::zeros(1, 8, 8);
        *img.at_mut(0, 4, 4) = 1.0;
        // 0.25 of width = 2 pixels, positive sign.
        let out = apply_randaug_op(&img, RandAugOp::TranslateX, 1.0, 25.0);
        assert!(out.at(0, 4, 6) > 0.9, "pixel should move right: {}", out.at(0, 4, 6));
        assert_eq!(out.at(0, 4, 4), 0.0);
    }

    #[test]
    fn mixup_blends_and_preserves_batch_mean() {
        let imgs: Vec<ImageBuf> = (0..8)
            .map(|i| ImageBuf::from_data(1, 2, 2, vec![i as f32 / 8.0; 4]).unwrap())
            .collect();
        let labels: Vec<Vec<f32>> = (0..8).map(|i| one_hot(i % 4, 4)).collect();
        let mut rng = RngStream::derive(3, "mixup", &[0]);
        let (mi, ml, lambda) = mixup(&imgs, &labels, 0.4, &mut rng).unwrap();
        assert!(lambda > 0.0 && lambda < 1.0);

        let orig_mean: f64 = imgs.iter().flat_map(|i| i.data.iter()).map(|&v| v as f64).sum::<f64>();
        let mixed_mean: f64 = mi.iter().flat_map(|i| i.data.iter()).map(|&v| v as f64).sum::<f64>();
        assert!((orig_mean - mixed_mean).abs() / orig_mean.abs() < 1e-6);

        // Labels stay on the simplex.
        for row in &ml {
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mixup_alpha_zero_is_identity() {
        let imgs = vec![gradient_image(4, 4), gradient_image(4, 4)];
        let labels = vec![one_hot(0, 2), one_hot(1, 2)];
        let mut rng = RngStream::derive(3, "mixup", &[1]);
        let (mi, ml, lambda) = mixup(&imgs, &labels, 0.0, &mut rng).unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(mi, imgs);
        assert_eq!(ml, labels);
        assert!(mixup(&imgs, &labels, -0.1, &mut rng).is_err());
    }

    #[test]
    fn cutout_zeroes_a_window() {
        let img = ImageBuf::from_data(1, 8, 8, vec![1.0; 64]).unwrap();
        let mut rng = RngStream::derive(4, "cutout", &[0]);
        let out = cutout(&img, 4, &mut rng).unwrap();
        let zeros = out.data.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0 && zeros <= 16, "zeroed {zeros}");
        assert_eq!(cutout(&img, 0, &mut rng).unwrap(), img);
        assert!(cutout(&img, 9, &mut rng).is_err());
    }

    #[test]
    fn standardize_uses_per_channel_stats() {
        let img = ImageBuf::from_data(2, 1, 2, vec![0.5, 1.0, 0.2, 0.4]).unwrap();
        let stats = ChannelStats { mean: vec![0.5, 0.2], std: vec![0.25, 0.1] };
        let out = standardize(&img, &stats);
        assert_eq!(out.data, vec![0.0, 2.0, 0.0, 2.0]);
    }
}
