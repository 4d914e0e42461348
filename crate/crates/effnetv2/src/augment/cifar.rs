//! CIFAR-10 binary archive I/O.
//!
//! The binary layout is five training files plus one test file, each holding
//! exactly 10,000 records of 3,073 bytes: one label byte (0..=9) followed by
//! 3,072 channel-major RGB pixels (identical to what `data_batch_1.bin` ...
//! `test_batch.bin` from the published archive contain). The loader verifies
//! sizes byte-for-byte and reports the offending file on any mismatch.
//!
//! Loading carves a held-out minival split (2% of training images, chosen by
//! a seeded shuffle) and computes per-channel statistics over the remaining
//! training images.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{ChannelStats, DataBundle, Dataset};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const CIFAR_CLASSES: u32 = 10;
/// Records per file and file counts fixed by the format.
pub const CIFAR_TRAIN_RECORDS: usize = 50_000;
pub const CIFAR_EVAL_RECORDS: usize = 10_000;

const RECORDS_PER_FILE: usize = 10_000;
const IMAGE_BYTES: usize = 3 * 32 * 32;
const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
/// Held-out fraction of the training set used as minival.
const HOLDOUT_FRACTION: f64 = 0.02;

fn train_files() -> Vec<String> {
    (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
}

fn read_batch(path: &Path) -> Result<Vec<(u8, Vec<u8>)>> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        detail: format!("cannot read: {e}"),
    })?;
    let want = RECORDS_PER_FILE * RECORD_BYTES;
    if bytes.len() != want {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            detail: format!("file holds {} bytes, expected exactly {want} ({RECORDS_PER_FILE} records of {RECORD_BYTES} bytes)", bytes.len()),
        });
    }
    let mut records = Vec::with_capacity(RECORDS_PER_FILE);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label >= CIFAR_CLASSES as u8 {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                detail: format!("record {i} has label {label}, expected 0..={}", CIFAR_CLASSES - 1),
            });
        }
        records.push((label, rec[1..].to_vec()));
    }
    Ok(records)
}

/// Load a CIFAR-10 binary archive from `dir`, splitting off a seeded 2%
/// minival from the training records.
pub fn load_cifar10(dir: &Path, seed: u64) -> Result<DataBundle> {
    let mut all_train = Vec::with_capacity(CIFAR_TRAIN_RECORDS);
    for name in train_files() {
        all_train.extend(read_batch(&dir.join(name))?);
    }
    let eval_records = read_batch(&dir.join("test_batch.bin"))?;

    // Seeded holdout: shuffle indices, take the first 2% as minival, keep
    // both splits in original record order.
    let holdout = (all_train.len() as f64 * HOLDOUT_FRACTION).round() as usize;
    let mut indices: Vec<usize> = (0..all_train.len()).collect();
    indices.shuffle(&mut RngStream::derive(seed, "cifar-holdout", &[]));
    let mut is_minival = vec![false; all_train.len()];
    for &i in &indices[..holdout] {
        is_minival[i] = true;
    }

    let mut train = Dataset::new(CIFAR_CLASSES, 3, 32, 32);
    let mut minival = Dataset::new(CIFAR_CLASSES, 3, 32, 32);
    for (i, (label, pixels)) in all_train.into_iter().enumerate() {
        let target = if is_minival[i] { &mut minival } else { &mut train };
        target.push_bytes(label as u32, pixels)?;
    }
    let mut eval = Dataset::new(CIFAR_CLASSES, 3, 32, 32);
    for (label, pixels) in eval_records {
        eval.push_bytes(label as u32, pixels)?;
    }

    let stats = ChannelStats::from_dataset(&train);
    Ok(DataBundle { train, minival, eval, stats })
}

/// Write datasets back out in the archive layout. `train` must hold exactly
/// 50,000 byte-stored records and `eval` 10,000; this is the inverse of the
/// loader (before its holdout split).
pub fn write_cifar10(dir: &Path, train: &Dataset, eval: &Dataset) -> Result<()> {
    if train.len() != CIFAR_TRAIN_RECORDS || eval.len() != CIFAR_EVAL_RECORDS {
        return Err(Error::arg(
            "write_cifar10",
            format!(
                "archive needs {CIFAR_TRAIN_RECORDS} train and {CIFAR_EVAL_RECORDS} eval records, got {}/{}",
                train.len(),
                eval.len()
            ),
        ));
    }
    fs::create_dir_all(dir)?;
    let dump = |ds: &Dataset, lo: usize, path: &Path| -> Result<()> {
        let mut out = Vec::with_capacity(RECORDS_PER_FILE * RECORD_BYTES);
        for i in lo..lo + RECORDS_PER_FILE {
            let bytes = ds.raw_bytes(i).ok_or_else(|| Error::arg(
                "write_cifar10",
                format!("record {i} is not byte-stored"),
            ))?;
            out.push(ds.label(i) as u8);
            out.extend_from_slice(bytes);
        }
        fs::write(path, out)?;
        Ok(())
    };
    for (fi, name) in train_files().iter().enumerate() {
        dump(train, fi * RECORDS_PER_FILE, &dir.join(name))?;
    }
    dump(eval, 0, &dir.join("test_batch.bin"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_uniform_archive(dir: &Path) {
        // Minimal valid archive: constant pixels, labels cycling 0..=9.
        for name in train_files().iter().chain([&"test_batch.bin".to_string()]) {
            let mut bytes = Vec::with_capacity(RECORDS_PER_FILE * RECORD_BYTES);
            for i in 0..RECORDS_PER_FILE {
                bytes.push((i % 10) as u8);
                bytes.extend(std::iter::repeat_n(((i * 7) % 251) as u8, IMAGE_BYTES));
            }
            fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn loads_and_splits_a_valid_archive() {
        let dir = tempfile::tempdir().unwrap();
        write_uniform_archive(dir.path());
        let bundle = load_cifar10(dir.path(), 42).unwrap();
        assert_eq!(bundle.train.len(), 49_000);
        assert_eq!(bundle.minival.len(), 1_000);
        assert_eq!(bundle.eval.len(), 10_000);
        // Splits are disjoint and exhaustive by construction; histogram of
        // train + minival matches the archive's label cycle.
        let mut hist = bundle.train.class_histogram();
        for (i, v) in bundle.minival.class_histogram().iter().enumerate() {
            hist[i] += v;
        }
        assert_eq!(hist, vec![5_000; 10]);

        // Same seed reproduces the exact split; different seed does not.
        let again = load_cifar10(dir.path(), 42).unwrap();
        assert_eq!(again.train.labels(), bundle.train.labels());
        assert_eq!(again.minival.labels(), bundle.minival.labels());
        let other = load_cifar10(dir.path(), 43).unwrap();
        assert_ne!(other.minival.labels(), bundle.minival.labels());
    }

    #[test]
    fn truncated_file_is_reported_with_name_and_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        write_uniform_archive(dir.path());
        let victim = dir.path().join("data_batch_3.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes.truncate(bytes.len() - 100);
        fs::write(&victim, bytes).unwrap();
        let err = load_cifar10(dir.path(), 0).unwrap_err().to_string();
        assert!(err.contains("data_batch_3.bin"), "{err}");
        assert!(err.contains(&format!("{}", RECORDS_PER_FILE * RECORD_BYTES)), "{err}");
    }

    #[test]
    fn missing_file_and_bad_label_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_cifar10(dir.path(), 0).is_err());

        write_uniform_archive(dir.path());
        let victim = dir.path().join("test_batch.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] = 11; // label out of range
        fs::write(&victim, bytes).unwrap();
        let err = load_cifar10(dir.path(), 0).unwrap_err().to_string();
        assert!(err.contains("label 11"), "{err}");
    }

    #[test]
    fn write_then_load_round_trips_bytes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        write_uniform_archive(dir.path());
        let original: Vec<Vec<u8>> =
            train_files().iter().map(|n| fs::read(dir.path().join(n)).unwrap()).collect();

        // Reassemble the full training set in record order from the split
        // loader by re-reading the raw files, then re-write and compare.
        let mut train = Dataset::new(CIFAR_CLASSES, 3, 32, 32);
        for name in train_files() {
            for (label, px) in read_batch(&dir.path().join(name)).unwrap() {
                train.push_bytes(label as u32, px).unwrap();
            }
        }
        let mut eval = Dataset::new(CIFAR_CLASSES, 3, 32, 32);
        for (label, px) in read_batch(&dir.path().join("test_batch.bin")).unwrap() {
            eval.push_bytes(label as u32, px).unwrap();
        }

        let out = tempfile::tempdir().unwrap();
        write_cifar10(out.path(), &train, &eval).unwrap();
        for (name, want) in train_files().iter().zip(&original) {
            assert_eq!(&fs::read(out.path().join(name)).unwrap(), want, "{name}");
        }
    }
}
