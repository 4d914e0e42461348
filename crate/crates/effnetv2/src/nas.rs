//! Training-aware random architecture search.
//!
//! The search samples stage-wise variants of a backbone — block type, kernel
//! size, expansion ratio, layer count; channel widths, strides, stem and head
//! stay fixed — trains each candidate briefly at reduced image size, and
//! ranks candidates by the weighted product `A * S^w * P^v` over accuracy,
//! step cost and parameter count.
//!
//! Two step-cost columns are kept deliberately. The reward uses a
//! deterministic per-step compute estimate (normalized against the backbone)
//! so that a search re-run with the same seed reproduces every reward
//! bit-for-bit; the measured wall-clock seconds per step are recorded
//! alongside in the trace for reporting, where run-to-run timing noise is
//! acceptable. Candidates are evaluated one at a time so the timing column
//! is never polluted by a concurrent candidate; the multi-core work happens
//! inside the tensor engine's data-parallel kernels.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::arch::{
    count_flops, count_params, estimate_train_memory, ArchSpec, BlockOp, BlockSpec, ForwardConfig,
    Model,
};
use crate::augment::DataBundle;
use crate::rng::RngStream;
use crate::schedule::{RegMagnitudes, StagePlan};
use crate::tensor::{Shape, Tape, Tensor};
use crate::trainer::{LrMode, RmsProp, TrainConfig, TrainSession};
use crate::{Error, Result};

/// Exponent on the normalized step cost in the reward product.
pub const REWARD_STEP_EXPONENT: f64 = -0.07;

/// Exponent on the normalized parameter count in the reward product.
pub const REWARD_PARAM_EXPONENT: f64 = -0.05;

/// Squeeze-excite ratio given to a stage that the sampler flips from fused
/// to inverted-bottleneck form (fused stages in this family carry none).
const FLIPPED_SE_RATIO: f64 = 0.25;

/// Per-stage factor choices. Every combination must yield a valid stage, so
/// the lists are restricted to the values the family supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageChoices {
    /// Block types to choose from (inverted-bottleneck and/or fused).
    pub ops: Vec<BlockOp>,
    /// Kernel sizes to choose from, out of {3, 5}.
    pub kernels: Vec<u32>,
    /// Expansion ratios to choose from, out of {1, 4, 6}.
    pub expansions: Vec<u32>,
    /// Layer count is drawn uniformly from
    /// `[max(1, L - layer_delta), L + layer_delta]` around the backbone's L.
    pub layer_delta: u32,
}

impl StageChoices {
    /// Every factor open: both block types, both kernels, all expansions.
    pub fn full(layer_delta: u32) -> StageChoices {
        StageChoices {
            ops: vec![BlockOp::MbConv, BlockOp::FusedMbConv],
            kernels: vec![3, 5],
            expansions: vec![1, 4, 6],
            layer_delta,
        }
    }

    /// Exactly the backbone stage's own values; sampling returns it unchanged.
    pub fn pinned(stage: &BlockSpec) -> StageChoices {
        StageChoices {
            ops: vec![stage.op_type],
            kernels: vec![stage.kernel],
            expansions: vec![stage.expansion_ratio],
            layer_delta: 0,
        }
    }

    fn check(&self, idx: usize, issues: &mut Vec<String>) {
        if self.ops.is_empty() {
            issues.push(format!("stage {idx}: no op choices"));
        }
        for op in &self.ops {
            if !matches!(op, BlockOp::MbConv | BlockOp::FusedMbConv) {
                issues.push(format!("stage {idx}: op choice {op:?} is not a stage block"));
            }
        }
        if self.kernels.is_empty() {
            issues.push(format!("stage {idx}: no kernel choices"));
        }
        for &k in &self.kernels {
            if !matches!(k, 3 | 5) {
                issues.push(format!("stage {idx}: kernel choice {k} not in {{3, 5}}"));
            }
        }
        if self.expansions.is_empty() {
            issues.push(format!("stage {idx}: no expansion choices"));
        }
        for &e in &self.expansions {
            if !matches!(e, 1 | 4 | 6) {
                issues.push(format!("stage {idx}: expansion choice {e} not in {{1, 4, 6}}"));
            }
        }
    }
}

/// Factorized search space around a backbone: one [`StageChoices`] per
/// backbone stage. Channels, strides, stem, head and classifier are the
/// backbone's; only the listed factors vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub backbone: ArchSpec,
    pub choices: Vec<StageChoices>,
}

impl SearchSpace {
    /// All factors open in every stage.
    pub fn full(backbone: ArchSpec, layer_delta: u32) -> SearchSpace {
        let choices = backbone.stages.iter().map(|_| StageChoices::full(layer_delta)).collect();
        SearchSpace { backbone, choices }
    }

    /// Degenerate space whose only member is the backbone itself.
    pub fn singleton(backbone: ArchSpec) -> SearchSpace {
        let choices = backbone.stages.iter().map(StageChoices::pinned).collect();
        SearchSpace { backbone, choices }
    }

    /// Check that every sampleable architecture will be valid; reports all
    /// problems at once.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let mut issues = Vec::new();
        if self.choices.len() != self.backbone.stages.len() {
            issues.push(format!(
                "{} stage choice sets for {} backbone stages",
                self.choices.len(),
                self.backbone.stages.len()
            ));
        }
        for (i, c) in self.choices.iter().enumerate() {
            c.check(i, &mut issues);
        }
        if issues.is_empty() { Ok(()) } else { Err(Error::InvalidConfig { issues }) }
    }
}

/// One architecture drawn from a [`SearchSpace`], with its evaluation
/// results once filled in. The reward is recomputable from the stored
/// columns: `reward = accuracy * step_cost^w * params^v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub arch: ArchSpec,
    /// Position in the sampling order.
    pub index: usize,
    /// Seed for this candidate's weight init and training run, drawn from
    /// the search stream at sampling time.
    pub seed: u64,
    /// Minival top-1 fraction after the short training run.
    pub accuracy: Option<f64>,
    /// Deterministic per-step compute cost, as a ratio to the backbone's.
    /// This is the step term inside the reward.
    pub step_cost: Option<f64>,
    /// Measured median wall-clock seconds per training step. Informational;
    /// never feeds the reward.
    pub step_seconds: Option<f64>,
    /// Parameter count as a ratio to the backbone's.
    pub params: Option<f64>,
    pub reward: Option<f64>,
    /// Training hit a non-finite loss; `accuracy` holds the chance level.
    pub diverged: bool,
    /// Evaluation was abandoned (for example, over the memory budget); such
    /// candidates keep no reward and rank last.
    pub error: Option<String>,
}

impl Candidate {
    fn unevaluated(arch: ArchSpec, index: usize, seed: u64) -> Candidate {
        Candidate {
            arch,
            index,
            seed,
            accuracy: None,
            step_cost: None,
            step_seconds: None,
            params: None,
            reward: None,
            diverged: false,
            error: None,
        }
    }
}

/// Exponents and backbone normalizers for the search reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    /// Must be negative: slower candidates are penalized.
    pub step_exponent: f64,
    /// Must be negative: larger candidates are penalized.
    pub param_exponent: f64,
    /// Backbone step cost; candidate costs are divided by this, so the
    /// backbone itself normalizes to exactly 1.
    pub step_baseline: f64,
    /// Backbone parameter count, same role.
    pub param_baseline: f64,
}

impl RewardParams {
    /// Standard exponents with baselines measured from `backbone` at the
    /// search image size.
    pub fn for_backbone(backbone: &ArchSpec, image_size: u32) -> Result<RewardParams> {
        let p = RewardParams {
            step_exponent: REWARD_STEP_EXPONENT,
            param_exponent: REWARD_PARAM_EXPONENT,
            step_baseline: step_cost(backbone, image_size)?,
            param_baseline: count_params(backbone)?.total_params as f64,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.step_exponent < 0.0) {
            issues.push(format!("step exponent {} must be negative", self.step_exponent));
        }
        if !(self.param_exponent < 0.0) {
            issues.push(format!("param exponent {} must be negative", self.param_exponent));
        }
        if !(self.step_baseline > 0.0 && self.step_baseline.is_finite()) {
            issues.push(format!("step baseline {} must be finite and positive", self.step_baseline));
        }
        if !(self.param_baseline > 0.0 && self.param_baseline.is_finite()) {
            issues.push(format!("param baseline {} must be finite and positive", self.param_baseline));
        }
        if issues.is_empty() { Ok(()) } else { Err(Error::InvalidConfig { issues }) }
    }

    /// Reward from raw (unnormalized) step cost and parameter count.
    /// Scaling a raw value and its baseline by the same factor leaves the
    /// result unchanged.
    pub fn reward_from_raw(&self, accuracy: f64, raw_step: f64, raw_params: f64) -> Result<f64> {
        self.validate()?;
        reward(accuracy, raw_step / self.step_baseline, raw_params / self.param_baseline, self)
    }
}

/// The weighted product `accuracy * step_ratio^w * param_ratio^v`. Strictly
/// increasing in accuracy, strictly decreasing in both ratios; at unit
/// ratios it is the accuracy itself.
pub fn reward(accuracy: f64, step_ratio: f64, param_ratio: f64, params: &RewardParams) -> Result<f64> {
    params.validate()?;
    if !(accuracy > 0.0 && accuracy <= 1.0) {
        return Err(Error::arg("reward", format!("accuracy {accuracy} outside (0, 1]")));
    }
    if !(step_ratio > 0.0 && step_ratio.is_finite()) {
        return Err(Error::arg("reward", format!("step ratio {step_ratio} must be finite and positive")));
    }
    if !(param_ratio > 0.0 && param_ratio.is_finite()) {
        return Err(Error::arg("reward", format!("param ratio {param_ratio} must be finite and positive")));
    }
    Ok(accuracy * step_ratio.powf(params.step_exponent) * param_ratio.powf(params.param_exponent))
}

/// Deterministic compute cost of one training step at `image_size`, in MAC
/// units per image: one forward pass plus roughly two forward-equivalents
/// for the backward pass. Batch size scales every candidate equally and is
/// left out; only ratios of this value are ever used.
pub fn step_cost(arch: &ArchSpec, image_size: u32) -> Result<f64> {
    Ok(3.0 * count_flops(arch, image_size)?.total_flops as f64)
}

/// Median wall-clock seconds for one full training step (forward, backward,
/// optimizer update) at the given size and batch, measured over `repeats`
/// timed steps after one untimed warm-up step. The activation estimate must
/// fit `memory_budget_bytes` or the measurement is refused before any
/// allocation.
pub fn measure_step_time(
    arch: &ArchSpec,
    image_size: u32,
    batch: usize,
    repeats: usize,
    memory_budget_bytes: u64,
) -> Result<f64> {
    if batch == 0 || repeats == 0 {
        return Err(Error::arg("measure_step_time", "batch and repeats must be positive".to_string()));
    }
    let need = estimate_train_memory(arch, image_size, batch, std::mem::size_of::<f32>())?;
    if need > memory_budget_bytes {
        return Err(Error::MemoryBudget {
            detail: format!(
                "training step needs ~{need} bytes of activations, budget is {memory_budget_bytes}"
            ),
        });
    }

    let mut model = Model::<f32>::new(arch, 0)?;
    let mut opt = RmsProp::new(&model.params, 0.9, 0.9, 1e-3, 0.0);
    let side = image_size as usize;
    let mut data_rng = RngStream::derive(0, "timing", &[]);
    let input = Tensor::from_vec(
        Shape { n: batch, c: 3, h: side, w: side },
        (0..batch * 3 * side * side).map(|_| data_rng.random::<f32>()).collect(),
    )?;
    let classes = arch.num_classes as usize;
    let mut targets = vec![0.0f32; batch * classes];
    for i in 0..batch {
        targets[i * classes + i % classes] = 1.0;
    }

    // Stochastic depth off and dropout zero: the timed work must be the
    // same every repeat.
    let fwd_cfg = ForwardConfig::train(0.0, 1.0, 0.99);
    let mut fwd_rng = RngStream::derive(0, "timing-fwd", &[]);
    let mut seconds = Vec::with_capacity(repeats);
    for rep in 0..=repeats {
        let start = Instant::now();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &input, &fwd_cfg, &mut fwd_rng)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &targets)?;
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> =
            pass.param_vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect();
        drop(tape);
        opt.step(&mut model.params, &grads, 1e-4)?;
        if rep > 0 {
            seconds.push(start.elapsed().as_secs_f64());
        }
    }
    seconds.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let mid = seconds.len() / 2;
    Ok(if seconds.len() % 2 == 1 { seconds[mid] } else { (seconds[mid - 1] + seconds[mid]) / 2.0 })
}

/// Settings for the short per-candidate training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Training epochs per candidate.
    pub epochs: u32,
    /// Image size for both the short training and its evaluations. Also the
    /// size at which step costs are estimated and measured.
    pub image_size: u32,
    pub batch_size: usize,
    /// Cosine-decayed learning rate for the short runs (absolute, not
    /// batch-scaled).
    pub lr: f64,
    /// Batch-norm running-stat momentum. Short runs need a faster constant
    /// than full training or the running statistics never catch up.
    pub bn_momentum: f64,
    /// Timed repeats for the wall-clock step measurement.
    pub timing_repeats: usize,
    /// Candidates whose activation estimate exceeds this are skipped.
    pub memory_budget_bytes: u64,
    /// Base seed: the sampling stream and every candidate's training seed
    /// derive from it.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epochs: 3,
            image_size: 64,
            batch_size: 32,
            lr: 0.01,
            bn_momentum: 0.9,
            timing_repeats: 5,
            memory_budget_bytes: 2 << 30,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.epochs == 0 {
            issues.push("epochs must be positive".to_string());
        }
        if self.image_size < 32 {
            issues.push(format!("image size {} < 32", self.image_size));
        }
        if self.batch_size == 0 {
            issues.push("batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            issues.push(format!("lr {} must be finite and positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            issues.push(format!("bn_momentum {} outside [0, 1)", self.bn_momentum));
        }
        if self.timing_repeats == 0 {
            issues.push("timing_repeats must be positive".to_string());
        }
        if issues.is_empty() { Ok(()) } else { Err(Error::InvalidConfig { issues }) }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_mode: LrMode::Cosine,
            lr_peak: self.lr,
            warmup_epochs: 0.0,
            bn_momentum: self.bn_momentum,
            // Short runs rank architectures; skip the stochastic regularizers
            // that only pay off over long schedules.
            stochastic_depth_survival: 1.0,
            ema_decay: 0.0,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Draw one candidate, uniformly and independently per factor per stage.
/// The space must have passed [`SearchSpace::validate`]; `index` is recorded
/// as provenance. Consumes a fixed number of draws regardless of the
/// choices, so traces depend only on (space, seed, budget).
pub fn sample_candidate(space: &SearchSpace, rng: &mut RngStream, index: usize) -> Candidate {
    let mut stages = Vec::with_capacity(space.backbone.stages.len());
    for (base, c) in space.backbone.stages.iter().zip(&space.choices) {
        let op = c.ops[rng.random_range(0..c.ops.len())];
        let kernel = c.kernels[rng.random_range(0..c.kernels.len())];
        let expansion = c.expansions[rng.random_range(0..c.expansions.len())];
        let lo = base.num_layers.saturating_sub(c.layer_delta).max(1);
        let hi = base.num_layers + c.layer_delta;
        let num_layers = rng.random_range(lo..=hi);
        let se_ratio = match op {
            BlockOp::MbConv if base.op_type == BlockOp::MbConv => base.se_ratio,
            BlockOp::MbConv => FLIPPED_SE_RATIO,
            _ => 0.0,
        };
        stages.push(BlockSpec {
            op_type: op,
            expansion_ratio: expansion,
            kernel,
            stride: base.stride,
            out_channels: base.out_channels,
            num_layers,
            se_ratio,
        });
    }
    let arch = ArchSpec { stages, ..space.backbone.clone() };
    Candidate::unevaluated(arch, index, rng.next_u64())
}

/// Train `cand` briefly and fill in its columns: minival accuracy, both
/// step-cost columns, the parameter ratio and the reward. A run that hits a
/// non-finite loss is kept, flagged, with accuracy pinned at chance level; a
/// run whose minival accuracy lands at exactly zero keeps that value and a
/// zero reward (the product's limit), since the power terms cannot rescue a
/// candidate that classifies nothing.
pub fn evaluate_candidate(
    cand: &Candidate,
    data: &DataBundle,
    eval_cfg: &EvalConfig,
    reward_params: &RewardParams,
) -> Result<Candidate> {
    eval_cfg.validate()?;
    reward_params.validate()?;
    if data.minival.is_empty() {
        return Err(Error::InvalidConfig { issues: vec!["minival split is empty".to_string()] });
    }

    let mut out = cand.clone();
    out.params =
        Some(count_params(&cand.arch)?.total_params as f64 / reward_params.param_baseline);
    out.step_cost =
        Some(step_cost(&cand.arch, eval_cfg.image_size)? / reward_params.step_baseline);

    let need = estimate_train_memory(
        &cand.arch,
        eval_cfg.image_size,
        eval_cfg.batch_size,
        std::mem::size_of::<f32>(),
    )?;
    if need > eval_cfg.memory_budget_bytes {
        return Err(Error::MemoryBudget {
            detail: format!(
                "candidate {} needs ~{need} bytes of activations, budget is {}",
                cand.index, eval_cfg.memory_budget_bytes
            ),
        });
    }

    let cfg = eval_cfg.train_config(cand.seed);
    let plans = vec![StagePlan {
        stage: 0,
        image_size: eval_cfg.image_size,
        regs: RegMagnitudes::ZERO,
        steps: cfg.total_steps(data.train.len()),
    }];
    let mut session = TrainSession::<f32>::new(&cand.arch, data.clone(), plans, cfg)?;
    let chance = 1.0 / f64::from(cand.arch.num_classes);
    out.accuracy = match session.run(None) {
        Ok(()) => Some(session.metrics().final_minival().ok_or_else(|| {
            Error::InvalidConfig { issues: vec!["short run recorded no minival accuracy".to_string()] }
        })?),
        Err(Error::Diverged { .. }) => {
            out.diverged = true;
            Some(chance)
        }
        Err(e) => return Err(e),
    };

    out.step_seconds = Some(measure_step_time(
        &cand.arch,
        eval_cfg.image_size,
        eval_cfg.batch_size,
        eval_cfg.timing_repeats,
        eval_cfg.memory_budget_bytes,
    )?);

    let (a, s, p) = (out.accuracy.unwrap(), out.step_cost.unwrap(), out.params.unwrap());
    out.reward = Some(if a == 0.0 { 0.0 } else { reward(a, s, p, reward_params)? });
    Ok(out)
}

/// Everything a search produces: candidates ranked best-first and the
/// Pareto-optimal subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Sorted by reward, descending; failed candidates (no reward) last.
    /// Ties broken by sampling order.
    pub candidates: Vec<Candidate>,
    /// Indices into `candidates` of the undominated subset, ascending.
    pub pareto: Vec<usize>,
    /// The normalizers the rewards were computed against.
    pub reward_params: RewardParams,
}

impl SearchOutcome {
    /// The highest-reward candidate, if any evaluation succeeded.
    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.first().filter(|c| c.reward.is_some())
    }
}

/// Evaluate `budget` uniformly sampled candidates and rank them. Individual
/// evaluation failures (memory budget, dataset trouble mid-run) are flagged
/// on the candidate and the search continues; sampling draws happen up front
/// in a fixed order, so failures never shift later candidates. When `trace`
/// is given, the full candidate list is persisted there as JSON lines.
pub fn random_search(
    space: &SearchSpace,
    budget: usize,
    data: &DataBundle,
    eval_cfg: &EvalConfig,
    trace: Option<&Path>,
) -> Result<SearchOutcome> {
    space.validate()?;
    eval_cfg.validate()?;
    if budget == 0 {
        return Err(Error::arg("random_search", "budget must be at least 1".to_string()));
    }
    let mut issues = Vec::new();
    if data.train.is_empty() {
        issues.push("training split is empty".to_string());
    }
    if data.minival.is_empty() {
        issues.push("minival split is empty".to_string());
    }
    if data.train.num_classes != space.backbone.num_classes {
        issues.push(format!(
            "dataset has {} classes but the backbone expects {}",
            data.train.num_classes, space.backbone.num_classes
        ));
    }
    if !issues.is_empty() {
        return Err(Error::InvalidConfig { issues });
    }

    let reward_params = RewardParams::for_backbone(&space.backbone, eval_cfg.image_size)?;
    let mut rng = RngStream::derive(eval_cfg.seed, "nas", &[]);
    let sampled: Vec<Candidate> =
        (0..budget).map(|i| sample_candidate(space, &mut rng, i)).collect();

    let mut candidates = Vec::with_capacity(budget);
    for cand in sampled {
        match evaluate_candidate(&cand, data, eval_cfg, &reward_params) {
            Ok(c) => candidates.push(c),
            Err(e) => candidates.push(Candidate { error: Some(e.to_string()), ..cand }),
        }
    }

    sort_candidates(&mut candidates);
    let pareto = pareto_front(&candidates);
    if let Some(path) = trace {
        write_trace(path, &candidates)?;
    }
    Ok(SearchOutcome { candidates, pareto, reward_params })
}

/// Reward-descending, unevaluated candidates last, sampling order as the
/// tie-break.
fn sort_candidates(candidates: &mut [Candidate]) {
    // Rewards are finite by construction; failed candidates sink via -inf.
    let key = |c: &Candidate| c.reward.unwrap_or(f64::NEG_INFINITY);
    candidates.sort_by(|a, b| {
        key(b).partial_cmp(&key(a)).expect("rewards are never NaN").then(a.index.cmp(&b.index))
    });
}

/// Indices of the candidates not dominated in (accuracy, step cost, params):
/// a dominator must be at least as good in all three and strictly better in
/// one. Only fully evaluated candidates participate; the deterministic step
/// cost is used so the front is reproducible across runs.
pub fn pareto_front(candidates: &[Candidate]) -> Vec<usize> {
    let cols = |c: &Candidate| Some((c.accuracy?, c.step_cost?, c.params?));
    let dominates = |x: (f64, f64, f64), y: (f64, f64, f64)| {
        x.0 >= y.0 && x.1 <= y.1 && x.2 <= y.2 && (x.0 > y.0 || x.1 < y.1 || x.2 < y.2)
    };
    let mut front = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let Some(me) = cols(c) else { continue };
        let dominated = candidates
            .iter()
            .enumerate()
            .any(|(j, other)| j != i && cols(other).is_some_and(|o| dominates(o, me)));
        if !dominated {
            front.push(i);
        }
    }
    front
}

/// Persist candidates as JSON lines, one object per candidate, in the order
/// given.
pub fn write_trace(path: &Path, candidates: &[Candidate]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in candidates {
        serde_json::to_writer(&mut w, c)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace written by [`write_trace`]; blank lines are ignored.
pub fn read_trace(path: &Path) -> Result<Vec<Candidate>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
