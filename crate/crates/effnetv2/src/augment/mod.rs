//! Datasets and data augmentation.
//!
//! Images move through the pipeline as [`ImageBuf`]s: channel-major `f32`
//! planes in `[0, 1]`. Datasets store pixels compactly (bytes for CIFAR,
//! floats for synthetic data) and decode per access. All augmentation ops are
//! pure functions of `(input, parameters, rng stream)`.

mod cifar;
mod image;
mod synthetic;

pub use cifar::{load_cifar10, write_cifar10, CIFAR_CLASSES, CIFAR_EVAL_RECORDS, CIFAR_TRAIN_RECORDS};
pub use image::{
    cutout, mixup, one_hot, randaugment, resize_bilinear, standardize, RandAugOp, RANDAUG_MAX_MAGNITUDE,
};
pub use synthetic::{synthetic_bundle, synthetic_cifar_archive, SyntheticSpec};

use crate::error::{Error, Result};

/// A decoded image: channel-major `f32` in `[0, 1]` (augmentation may leave
/// standardized values outside that range later in the pipeline).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageBuf { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(ImageBuf { channels, height, width, data })
    }

    #[inline(always)]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// Pixel storage inside a dataset.
#[derive(Clone, Debug)]
enum PixelStore {
    /// 8-bit values; decoded as `v / 255`.
    Bytes(Vec<u8>),
    Floats(Vec<f32>),
}

/// A labeled image collection with uniform geometry.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    images: Vec<PixelStore>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(num_classes: u32, channels: usize, height: usize, width: usize) -> Self {
        Dataset { num_classes, channels, height, width, images: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn push_bytes(&mut self, label: u32, bytes: Vec<u8>) -> Result<()> {
        self.check_push(label, bytes.len())?;
        self.images.push(PixelStore::Bytes(bytes));
        self.labels.push(label);
        Ok(())
    }

    pub fn push_floats(&mut self, label: u32, floats: Vec<f32>) -> Result<()> {
        self.check_push(label, floats.len())?;
        self.images.push(PixelStore::Floats(floats));
        self.labels.push(label);
        Ok(())
    }

    fn check_push(&self, label: u32, len: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::arg("dataset", format!("label {label} >= {} classes", self.num_classes)));
        }
        let want = self.channels * self.height * self.width;
        if len != want {
            return Err(Error::shape("dataset", format!("{len} pixel values, expected {want}")));
        }
        Ok(())
    }

    /// Decode image `i` to floats in `[0, 1]`.
    pub fn decode(&self, i: usize) -> ImageBuf {
        let data = match &self.images[i] {
            PixelStore::Bytes(b) => b.iter().map(|&v| v as f32 / 255.0).collect(),
            PixelStore::Floats(f) => f.clone(),
        };
        ImageBuf { channels: self.channels, height: self.height, width: self.width, data }
    }

    /// Raw bytes of image `i` if stored as bytes (CIFAR archives).
    pub fn raw_bytes(&self, i: usize) -> Option<&[u8]> {
        match &self.images[i] {
            PixelStore::Bytes(b) => Some(b),
            PixelStore::Floats(_) => None,
        }
    }

    /// Count of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Per-channel standardization statistics, computed from a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Identity transform (mean 0, std 1).
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Compute from every image of a dataset. Degenerate channels get std 1.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let c = ds.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let plane = ds.height * ds.width;
        for i in 0..ds.len() {
            let img = ds.decode(i);
            for ci in 0..c {
                for &v in &img.data[ci * plane..(ci + 1) * plane] {
                    sum[ci] += v as f64;
                    sq[ci] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (ds.len() * plane) as f64;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ci in 0..c {
            let mu = sum[ci] / n;
            let var = (sq[ci] / n - mu * mu).max(0.0);
            mean.push(mu as f32);
            std.push(if var > 1e-12 { (var.sqrt()) as f32 } else { 1.0 });
        }
        ChannelStats { mean, std }
    }
}

/// Train / minival / eval splits plus the training-set statistics.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub minival: Dataset,
    pub eval: Dataset,
    pub stats: ChannelStats,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_push_validates_label_and_size() {
        let mut ds = Dataset::new(2, 1, 2, 2);
        assert!(ds.push_floats(2, vec![0.0; 4]).is_err());
        assert!(ds.push_floats(0, vec![0.0; 3]).is_err());
        ds.push_floats(1, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.class_histogram(), vec![0, 1]);
    }

    #[test]
    fn byte_images_decode_to_unit_range() {
        let mut ds = Dataset::new(1, 1, 1, 4);
        ds.push_bytes(0, vec![0, 51, 204, 255]).unwrap();
        let img = ds.decode(0);
        assert_eq!(img.data, vec![0.0, 51.0 / 255.0, 204.0 / 255.0, 1.0]);
        assert_eq!(ds.raw_bytes(0).unwrap(), &[0, 51, 204, 255]);
    }

    #[test]
    fn channel_stats_match_direct_computation() {
        let mut ds = Dataset::new(1, 2, 1, 2);
        ds.push_floats(0, vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        ds.push_floats(0, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let stats = ChannelStats::from_dataset(&ds);
        assert!((stats.mean[0] - 0.5).abs() < 1e-6);
        assert!((stats.std[0] - 0.5).abs() < 1e-6);
        // Constant channel: degenerate std replaced by 1.
        assert!((stats.mean[1] - 0.5).abs() < 1e-6);
        assert_eq!(stats.std[1], 1.0);
    }
}
