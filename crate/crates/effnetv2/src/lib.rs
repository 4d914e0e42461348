//! EfficientNetV2 in plain Rust: architecture specs and their parameter/FLOP
//! analysis, a small NCHW autodiff engine, data loading and augmentation,
//! progressive-resizing training with adaptive regularization, and a
//! reward-guided random architecture search.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense 4-D tensors and the reverse-mode tape.
//! - [`arch`]: block/stage specs, presets, compound scaling, cost analysis,
//!   and instantiation into trainable models.
//! - [`augment`]: datasets (CIFAR-10 binary and synthetic), resizing, and the
//!   augmentation ops whose strength the schedule drives.
//! - [`schedule`]: progressive image-size / regularization stage plans.
//! - [`trainer`]: RMSProp training loop, EMA, checkpoints, metrics.
//! - [`nas`]: sampling, reward, and random search over a stage-level space.
//!
//! Heavy loops are data-parallel via rayon when the default `parallel`
//! feature is on; [`parallel::set_parallel_enabled`] switches to the
//! sequential fallback at runtime, and disabling the feature removes rayon
//! entirely. Results are bit-identical either way.

pub mod arch;
pub mod augment;
pub mod error;
pub mod nas;
pub mod parallel;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
