//! Synthetic class-conditional datasets.
//!
//! Each class gets a fixed Gaussian template; samples are the template plus
//! fresh Gaussian noise, mixed by a signal-to-noise knob and clamped to
//! `[0, 1]`. High `snr` makes classes trivially separable, low `snr` makes
//! them hard — useful for fast, deterministic training experiments that still
//! exercise the full data path. `synthetic_cifar_archive` serializes such a
//! dataset in the CIFAR-10 binary layout so the archive loader can be tested
//! end to end without the real download.

use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cifar::{write_cifar10, CIFAR_EVAL_RECORDS, CIFAR_TRAIN_RECORDS};
use super::{ChannelStats, DataBundle, Dataset};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: u32,
    /// Training samples (classes are cycled, so counts stay balanced).
    pub train: usize,
    pub eval: usize,
    pub image_size: usize,
    /// Signal-to-noise ratio: template amplitude is `0.25 * snr / (1 + snr)`,
    /// noise amplitude `0.25 / (1 + snr)`.
    pub snr: f64,
}

impl Default for SyntheticSpec {
    /// A CIFAR-shaped dataset small enough for desk-scale runs.
    fn default() -> Self {
        SyntheticSpec { num_classes: 10, train: 2048, eval: 512, image_size: 32, snr: 4.0 }
    }
}

impl SyntheticSpec {
    fn amplitudes(&self) -> (f32, f32) {
        let sig = 0.25 * self.snr / (1.0 + self.snr);
        let noise = 0.25 / (1.0 + self.snr);
        (sig as f32, noise as f32)
    }
}

fn class_templates(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f32>> {
    let len = 3 * spec.image_size * spec.image_size;
    let mut rng = RngStream::derive(seed, "syn-templates", &[]);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    (0..spec.num_classes)
        .map(|_| (0..len).map(|_| normal.sample(&mut rng) as f32).collect())
        .collect()
}

fn sample(templates: &[Vec<f32>], spec: &SyntheticSpec, class: u32, rng: &mut RngStream) -> Vec<f32> {
    let (sig, noise) = spec.amplitudes();
    templates[class as usize]
        .iter()
        .map(|&t| {
            let n: f64 = StandardNormal.sample(rng);
            (0.5 + sig * t + noise * n as f32).clamp(0.0, 1.0)
        })
        .collect()
}

fn fill(ds: &mut Dataset, templates: &[Vec<f32>], spec: &SyntheticSpec, count: usize, seed: u64, tag: &str) -> Result<()> {
    for i in 0..count {
        let class = (i as u32) % spec.num_classes;
        let mut rng = RngStream::derive(seed, tag, &[i as u64]);
        ds.push_floats(class, sample(templates, spec, class, &mut rng))?;
    }
    Ok(())
}

/// Generate train / minival / eval splits (minival is 2% of the training
/// count, at least one sample). Fully determined by `(spec, seed)`.
pub fn synthetic_bundle(spec: &SyntheticSpec, seed: u64) -> Result<DataBundle> {
    if spec.num_classes < 2 {
        return Err(Error::arg("synthetic", format!("{} classes < 2", spec.num_classes)));
    }
    if spec.train == 0 || spec.eval == 0 {
        return Err(Error::arg("synthetic", "empty train or eval split".to_string()));
    }
    if spec.snr < 0.0 {
        return Err(Error::arg("synthetic", format!("snr {} < 0", spec.snr)));
    }
    let templates = class_templates(spec, seed);
    let minival_count = ((spec.train as f64 * 0.02).round() as usize).max(1);

    let mut train = Dataset::new(spec.num_classes, 3, spec.image_size, spec.image_size);
    let mut minival = Dataset::new(spec.num_classes, 3, spec.image_size, spec.image_size);
    let mut eval = Dataset::new(spec.num_classes, 3, spec.image_size, spec.image_size);
    fill(&mut train, &templates, spec, spec.train, seed, "syn-train")?;
    fill(&mut minival, &templates, spec, minival_count, seed, "syn-minival")?;
    fill(&mut eval, &templates, spec, spec.eval, seed, "syn-eval")?;

    let stats = ChannelStats::from_dataset(&train);
    Ok(DataBundle { train, minival, eval, stats })
}

/// Write a full-size synthetic archive (50,000 train / 10,000 test records of
/// 32x32 RGB) in the CIFAR-10 binary layout.
pub fn synthetic_cifar_archive(dir: &Path, seed: u64, snr: f64) -> Result<()> {
    let spec = SyntheticSpec { num_classes: 10, train: CIFAR_TRAIN_RECORDS, eval: CIFAR_EVAL_RECORDS, image_size: 32, snr };
    let templates = class_templates(&spec, seed);
    let quantize = |vals: Vec<f32>| -> Vec<u8> { vals.iter().map(|&v| (v * 255.0).round() as u8).collect() };

    let mut train = Dataset::new(10, 3, 32, 32);
    for i in 0..spec.train {
        let class = (i as u32) % 10;
        let mut rng = RngStream::derive(seed, "syn-train", &[i as u64]);
        train.push_bytes(class, quantize(sample(&templates, &spec, class, &mut rng)))?;
    }
    let mut eval = Dataset::new(10, 3, 32, 32);
    for i in 0..spec.eval {
        let class = (i as u32) % 10;
        let mut rng = RngStream::derive(seed, "syn-eval", &[i as u64]);
        eval.push_bytes(class, quantize(sample(&templates, &spec, class, &mut rng)))?;
    }
    write_cifar10(dir, &train, &eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec { num_classes: 4, train: 100, eval: 20, image_size: 8, snr: 3.0 }
    }

    #[test]
    fn bundle_shapes_and_balance() {
        let b = synthetic_bundle(&spec(), 9).unwrap();
        assert_eq!(b.train.len(), 100);
        assert_eq!(b.minival.len(), 2);
        assert_eq!(b.eval.len(), 20);
        assert_eq!(b.train.class_histogram(), vec![25; 4]);
        assert_eq!(b.eval.class_histogram(), vec![5; 4]);
        for &v in &b.train.decode(0).data {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let a = synthetic_bundle(&spec(), 9).unwrap();
        let b = synthetic_bundle(&spec(), 9).unwrap();
        let c = synthetic_bundle(&spec(), 10).unwrap();
        assert_eq!(a.train.decode(17).data, b.train.decode(17).data);
        assert_ne!(a.train.decode(17).data, c.train.decode(17).data);
    }

    #[test]
    fn higher_snr_tightens_classes() {
        // Distance between same-class samples shrinks relative to the
        // template amplitude as snr grows.
        let lo = synthetic_bundle(&SyntheticSpec { snr: 0.5, ..spec() }, 1).unwrap();
        let hi = synthetic_bundle(&SyntheticSpec { snr: 8.0, ..spec() }, 1).unwrap();
        let spread = |b: &DataBundle| -> f32 {
            // samples 0 and 4 share class 0
            b.train
                .decode(0)
                .data
                .iter()
                .zip(&b.train.decode(4).data)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f32>()
        };
        assert!(spread(&hi) < spread(&lo));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synthetic_bundle(&SyntheticSpec { num_classes: 1, ..spec() }, 0).is_err());
        assert!(synthetic_bundle(&SyntheticSpec { train: 0, ..spec() }, 0).is_err());
        assert!(synthetic_bundle(&SyntheticSpec { snr: -1.0, ..spec() }, 0).is_err());
    }
}
