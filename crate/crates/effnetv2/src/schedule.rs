//! Progressive training schedules.
//!
//! Training is split into `num_stages` stages. Stage `i` trains at image size
//! `S_i = S0 + (Se - S0) * i / (M - 1)` with each regularizer magnitude
//! (dropout rate, augmentation magnitude, mixup alpha) interpolated by the
//! same fraction, so easy low-resolution stages get weak regularization and
//! the final stage trains at exactly the target size and strength.
//!
//! Two baselines share the size ramp: [`vanilla_progressive`] keeps every
//! regularizer pinned at its maximum, and [`random_resize`] redraws the size
//! uniformly every few epochs instead of ramping it.
//!
//! Rounding rule: interior stage sizes are rounded to the nearest multiple of
//! 8 (kernel-friendly shapes) and clamped to `[size_min, size_max]`; the two
//! endpoints are kept exact so the final stage trains at precisely
//! `size_max`. Regularizer magnitudes are never rounded. The step budget is
//! `total_steps / num_stages` per stage with the remainder folded into the
//! last stage, so the target-size stage is never the one that gets shortened.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::MAX_IMAGE_SIZE;
use crate::augment::RANDAUG_MAX_MAGNITUDE;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Default number of progressive stages.
pub const DEFAULT_NUM_STAGES: usize = 4;

/// Default epoch interval between size redraws in [`random_resize`].
pub const DEFAULT_RESAMPLE_EPOCHS: usize = 8;

/// Smallest schedulable image size (the resize kernel's lower bound).
pub const MIN_SCHEDULE_SIZE: u32 = 8;

/// Magnitudes of the three co-scheduled regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegMagnitudes {
    /// Dropout rate for the classifier head, in `[0, 1)`.
    pub dropout: f64,
    /// Augmentation magnitude, in `[0, 30]`.
    pub randaug: f64,
    /// Mixup Beta parameter, `>= 0` (0 disables mixup).
    pub mixup: f64,
}

impl RegMagnitudes {
    /// All three regularizers off.
    pub const ZERO: RegMagnitudes = RegMagnitudes { dropout: 0.0, randaug: 0.0, mixup: 0.0 };

    fn lerp(lo: RegMagnitudes, hi: RegMagnitudes, t: f64) -> RegMagnitudes {
        RegMagnitudes {
            dropout: lerp(lo.dropout, hi.dropout, t),
            randaug: lerp(lo.randaug, hi.randaug, t),
            mixup: lerp(lo.mixup, hi.mixup, t),
        }
    }

    pub(crate) fn check(self, label: &str, issues: &mut Vec<String>) {
        if !(0.0..1.0).contains(&self.dropout) {
            issues.push(format!("{label}.dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=RANDAUG_MAX_MAGNITUDE).contains(&self.randaug) {
            issues.push(format!(
                "{label}.randaug {} outside [0, {RANDAUG_MAX_MAGNITUDE}]",
                self.randaug
            ));
        }
        if !self.mixup.is_finite() || self.mixup < 0.0 {
            issues.push(format!("{label}.mixup {} must be finite and >= 0", self.mixup));
        }
    }
}

/// Endpoint-exact linear interpolation, monotone in `t`.
fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    if t <= 0.0 {
        lo
    } else if t >= 1.0 {
        hi
    } else {
        (lo + (hi - lo) * t).clamp(lo, hi)
    }
}

/// Declarative description of a progressive run: step budget, stage count,
/// and the size/regularization ramp endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub total_steps: u64,
    pub num_stages: usize,
    pub size_min: u32,
    pub size_max: u32,
    pub reg_min: RegMagnitudes,
    pub reg_max: RegMagnitudes,
}

impl StageSchedule {
    /// Check every field; returns all problems at once rather than the first.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.total_steps == 0 {
            issues.push("total_steps must be positive".to_string());
        }
        if self.num_stages == 0 {
            issues.push("num_stages must be at least 1".to_string());
        }
        if self.num_stages as u64 > self.total_steps {
            issues.push(format!(
                "num_stages {} exceeds total_steps {}",
                self.num_stages, self.total_steps
            ));
        }
        if self.size_min > self.size_max {
            issues.push(format!("size_min {} exceeds size_max {}", self.size_min, self.size_max));
        }
        if self.size_min < MIN_SCHEDULE_SIZE {
            issues.push(format!("size_min {} < {MIN_SCHEDULE_SIZE}", self.size_min));
        }
        if self.size_max > MAX_IMAGE_SIZE {
            issues.push(format!("size_max {} > {MAX_IMAGE_SIZE}", self.size_max));
        }
        self.reg_min.check("reg_min", &mut issues);
        self.reg_max.check("reg_max", &mut issues);
        for (name, lo, hi) in [
            ("dropout", self.reg_min.dropout, self.reg_max.dropout),
            ("randaug", self.reg_min.randaug, self.reg_max.randaug),
            ("mixup", self.reg_min.mixup, self.reg_max.mixup),
        ] {
            if lo > hi {
                issues.push(format!("reg_min.{name} {lo} exceeds reg_max.{name} {hi}"));
            }
        }
        if issues.is_empty() { Ok(()) } else { Err(Error::InvalidConfig { issues }) }
    }

    /// Size and regularization ramps from the published training recipes.
    /// `v2-s` ramps 128->300 with magnitudes 5->15 / dropout 0.1->0.3;
    /// `v2-m` and `v2-l` ramp 128->380 with progressively stronger maxima.
    pub fn preset(name: &str, total_steps: u64, num_stages: usize) -> Result<StageSchedule> {
        let reg_min = RegMagnitudes { dropout: 0.1, randaug: 5.0, mixup: 0.0 };
        let (size_max, reg_max) = match name {
            "v2-s" => (300, RegMagnitudes { dropout: 0.3, randaug: 15.0, mixup: 0.0 }),
            "v2-m" => (380, RegMagnitudes { dropout: 0.4, randaug: 20.0, mixup: 0.2 }),
            "v2-l" => (380, RegMagnitudes { dropout: 0.5, randaug: 25.0, mixup: 0.4 }),
            other => {
                return Err(Error::arg(
                    "schedule_preset",
                    format!("unknown schedule preset `{other}` (expected v2-s, v2-m, or v2-l)"),
                ));
            }
        };
        let cfg = StageSchedule {
            total_steps,
            num_stages,
            size_min: 128,
            size_max,
            reg_min,
            reg_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One resolved stage: train `steps` steps at `image_size` with `regs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StagePlan {
    pub stage: usize,
    pub image_size: u32,
    pub regs: RegMagnitudes,
    pub steps: u64,
}

/// Resolve a schedule into per-stage plans: sizes and regularizer magnitudes
/// interpolate linearly from the minima to the maxima. A single-stage
/// schedule trains entirely at `(size_max, reg_max)`.
pub fn make_schedule(cfg: &StageSchedule) -> Result<Vec<StagePlan>> {
    cfg.validate()?;
    let m = cfg.num_stages;
    let base = cfg.total_steps / m as u64;
    let mut plans = Vec::with_capacity(m);
    for i in 0..m {
        let t = if m == 1 { 1.0 } else { i as f64 / (m - 1) as f64 };
        let image_size = interp_size(cfg.size_min, cfg.size_max, t, i, m);
        let regs = RegMagnitudes::lerp(cfg.reg_min, cfg.reg_max, t);
        let steps = if i + 1 == m { cfg.total_steps - base * (m as u64 - 1) } else { base };
        plans.push(StagePlan { stage: i, image_size, regs, steps });
    }
    Ok(plans)
}

fn interp_size(lo: u32, hi: u32, t: f64, i: usize, m: usize) -> u32 {
    if i == 0 && m > 1 {
        return lo;
    }
    if i + 1 == m {
        return hi;
    }
    let raw = lo as f64 + (hi - lo) as f64 * t;
    let rounded = ((raw / 8.0).round() * 8.0) as u32;
    rounded.clamp(lo, hi)
}

/// Size ramp identical to [`make_schedule`], but every stage uses `reg_max`:
/// the fixed-regularization baseline. Any accuracy difference against the
/// adaptive schedule is attributable to regularization alone.
pub fn vanilla_progressive(cfg: &StageSchedule) -> Result<Vec<StagePlan>> {
    let mut plans = make_schedule(cfg)?;
    for p in &mut plans {
        p.regs = cfg.reg_max;
    }
    Ok(plans)
}

/// Random-resize baseline: the image size is redrawn uniformly from the
/// multiples of 8 in `[size_min, size_max]` every `resample_every_epochs`
/// epochs (one segment = that many epochs' worth of steps; the tail segment
/// absorbs the remainder). With `adaptive` set, each segment's regularizers
/// interpolate by size fraction `(S - S0) / (Se - S0)`; otherwise they stay
/// at `reg_max`. A degenerate `size_min == size_max` range yields a constant
/// stream at that size (and `reg_max`, there being no fraction to map).
pub fn random_resize(
    cfg: &StageSchedule,
    resample_every_epochs: usize,
    steps_per_epoch: u64,
    adaptive: bool,
    rng: &mut RngStream,
) -> Result<Vec<StagePlan>> {
    cfg.validate()?;
    if resample_every_epochs == 0 || steps_per_epoch == 0 {
        return Err(Error::arg(
            "random_resize",
            "resample_every_epochs and steps_per_epoch must be positive",
        ));
    }
    let grid = size_grid(cfg)?;
    let segment = resample_every_epochs as u64 * steps_per_epoch;
    let mut plans = Vec::new();
    let mut done = 0;
    while done < cfg.total_steps {
        let steps = segment.min(cfg.total_steps - done);
        let image_size = grid[rng.random_range(0..grid.len())];
        let regs = if adaptive && cfg.size_max > cfg.size_min {
            let t = (image_size - cfg.size_min) as f64 / (cfg.size_max - cfg.size_min) as f64;
            RegMagnitudes::lerp(cfg.reg_min, cfg.reg_max, t)
        } else {
            cfg.reg_max
        };
        plans.push(StagePlan { stage: plans.len(), image_size, regs, steps });
        done += steps;
    }
    Ok(plans)
}

fn size_grid(cfg: &StageSchedule) -> Result<Vec<u32>> {
    if cfg.size_min == cfg.size_max {
        return Ok(vec![cfg.size_min]);
    }
    let lo = cfg.size_min.div_ceil(8) * 8;
    let hi = (cfg.size_max / 8) * 8;
    if lo > hi {
        return Err(Error::InvalidConfig {
            issues: vec![format!(
                "size range [{}, {}] contains no multiple of 8",
                cfg.size_min, cfg.size_max
            )],
        });
    }
    Ok((lo..=hi).step_by(8).collect())
}
