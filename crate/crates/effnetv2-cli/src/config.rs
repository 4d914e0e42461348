//! Run-config files and the plumbing commands share: failure classification,
//! architecture resolution, dataset loading, output-directory resolution.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use effnetv2::arch::{preset, preset_names, ArchSpec};
use effnetv2::augment::{load_cifar10, synthetic_bundle, DataBundle, SyntheticSpec};
use effnetv2::schedule::StageSchedule;
use effnetv2::trainer::TrainConfig;

/// Overrides the default `./runs` output directory when set.
pub const OUTPUT_DIR_ENV: &str = "EFFNETV2_OUTPUT_DIR";

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration: exit 1.
    Validation(String),
    /// The work itself failed: exit 2.
    Runtime(String),
}

impl Failure {
    pub fn validation(e: impl std::fmt::Display) -> Failure {
        Failure::Validation(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

/// One file describing a whole training run. Unknown keys are rejected so
/// typos surface instead of silently falling back to defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name or path to a JSON architecture file.
    pub arch: String,
    /// "synthetic" or a directory containing the CIFAR-10 binary batches.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub output_dir: Option<PathBuf>,
    /// When set, overrides `train.seed` so one knob reseeds the whole run.
    pub seed: Option<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    pub schedule: StageSchedule,
    /// Generation parameters used when `dataset` is "synthetic".
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

fn default_dataset() -> String {
    "synthetic".to_string()
}

impl RunConfig {
    /// Parse and fully validate `path`. Every problem found is reported, one
    /// per line, not just the first.
    pub fn load(path: &Path) -> Result<RunConfig, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;

        let mut issues = Vec::new();
        match resolve_arch(&cfg.arch, cfg.num_classes()) {
            Ok(arch) if arch.num_classes != cfg.num_classes() => issues.push(format!(
                "architecture file declares {} classes but the dataset has {}",
                arch.num_classes,
                cfg.num_classes()
            )),
            Ok(_) => {}
            Err(Failure::Validation(msg)) | Err(Failure::Runtime(msg)) => issues.push(msg),
        }
        if cfg.dataset != "synthetic" && !Path::new(&cfg.dataset).is_dir() {
            issues.push(format!("dataset directory '{}' does not exist", cfg.dataset));
        }
        if let Err(e) = cfg.train.validate() {
            push_issue_lines(&e, &mut issues);
        }
        if let Err(e) = cfg.schedule.validate() {
            push_issue_lines(&e, &mut issues);
        }
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(Failure::Validation(format!("{}:\n{}", path.display(), issues.join("\n"))))
        }
    }

    /// Classes implied by the dataset choice; architecture presets are built
    /// to match.
    pub fn num_classes(&self) -> u32 {
        if self.dataset == "synthetic" {
            self.synthetic.num_classes
        } else {
            10
        }
    }

    /// Command-line flags win over file values.
    pub fn apply_overrides(&mut self, seed: Option<u64>, epochs: Option<u32>) {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(e) = epochs {
            self.train.epochs = e;
        }
    }

    /// The training config with the top-level seed folded in.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }
}

fn push_issue_lines(e: &effnetv2::Error, issues: &mut Vec<String>) {
    for line in e.to_string().lines() {
        issues.push(line.to_string());
    }
}

/// A preset name wins; anything else is read as a JSON architecture file
/// (which carries its own classifier width, so `num_classes` only shapes
/// presets).
pub fn resolve_arch(name: &str, num_classes: u32) -> Result<ArchSpec, Failure> {
    if preset_names().contains(&name) {
        return preset(name, num_classes).map_err(Failure::validation);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(Failure::Validation(format!(
            "'{name}' is neither a preset ({}) nor an existing file",
            preset_names().join(", ")
        )));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("{name}: {e}")))?;
    // serde_json reports line and column on parse failures.
    let arch: ArchSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{name}: {e}")))?;
    arch.validate().map_err(|e| Failure::Validation(format!("{name}: {e}")))?;
    Ok(arch)
}

/// "synthetic" generates a bundle from `spec`; anything else is required to
/// be a CIFAR-10 binary directory.
pub fn load_dataset(dataset: &str, spec: &SyntheticSpec, seed: u64) -> Result<DataBundle, Failure> {
    if dataset == "synthetic" {
        synthetic_bundle(spec, seed).map_err(Failure::validation)
    } else {
        load_cifar10(Path::new(dataset), seed).map_err(Failure::validation)
    }
}

/// Flag beats config beats environment beats `./runs`.
pub fn resolve_output_dir(flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or(file)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
