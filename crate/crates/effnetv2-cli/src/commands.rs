//! The subcommand bodies. Each returns a classified failure so `main` can
//! map it to the exit-code contract.

use std::io::Write as _;
use std::path::Path;

use effnetv2::arch::{count_flops, ArchSpec, BlockOp, BlockSpec};
use effnetv2::augment::SyntheticSpec;
use effnetv2::nas::{random_search, EvalConfig, SearchSpace};
use effnetv2::schedule::{make_schedule, vanilla_progressive, StagePlan, StageSchedule};
use effnetv2::trainer::{checkpoint_path, resolve_plans, Metrics, TrainSession};

use crate::config::{
    load_dataset, resolve_arch, resolve_output_dir, CmdResult, Failure, RunConfig,
};
use crate::{CountArgs, ExportArgs, ExportFormat, InspectArgs, NasArgs, ScheduleArgs, TrainArgs};

/// Write to stdout, treating a closed pipe (`effnetv2 ... | head`) as an
/// ordinary early exit instead of a panic.
fn emit(text: impl std::fmt::Display) -> CmdResult {
    let mut out = std::io::stdout().lock();
    match write!(out, "{text}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(Failure::runtime(e)),
    }
}

/// Fixed-width plain-text table; every command's human output goes through
/// this so the layouts stay consistent.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.iter().map(|h| h.to_string()).collect());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.clone()));
        out.push('\n');
    }
    out
}

fn operator_name(s: &BlockSpec) -> String {
    let k = s.kernel;
    match s.op_type {
        BlockOp::Conv => format!("conv{k}x{k}"),
        BlockOp::FusedMbConv => format!("fused_mbconv{}, k{k}x{k}", s.expansion_ratio),
        BlockOp::MbConv => {
            let se = if s.se_ratio > 0.0 { format!(", se{}", s.se_ratio) } else { String::new() };
            format!("mbconv{}, k{k}x{k}{se}", s.expansion_ratio)
        }
        BlockOp::Head => "conv1x1 + pool + fc".to_string(),
    }
}

fn stage_rows(arch: &ArchSpec) -> Vec<Vec<String>> {
    let row = |label: String, s: &BlockSpec| {
        vec![
            label,
            operator_name(s),
            s.stride.to_string(),
            s.out_channels.to_string(),
            s.num_layers.to_string(),
        ]
    };
    let mut rows = vec![row("stem".to_string(), &arch.stem)];
    for (i, s) in arch.stages.iter().enumerate() {
        rows.push(row((i + 1).to_string(), s));
    }
    rows.push(row("head".to_string(), &arch.head));
    rows
}

pub fn inspect(args: &InspectArgs) -> CmdResult {
    let arch = resolve_arch(&args.arch, args.classes)?;
    if args.json {
        emit(format!("{}\n", serde_json::to_string_pretty(&arch).map_err(Failure::runtime)?))
    } else {
        emit(format!(
            "{}classes: {}  default image size: {}\n",
            render_table(&["stage", "operator", "stride", "channels", "layers"], &stage_rows(&arch)),
            arch.num_classes,
            arch.default_image_size
        ))
    }
}

pub fn count(args: &CountArgs) -> CmdResult {
    let arch = resolve_arch(&args.arch, args.classes)?;
    let size = args.image_size.unwrap_or(arch.default_image_size);
    let report = count_flops(&arch, size).map_err(Failure::validation)?;
    if args.json {
        return emit(format!("{}\n", serde_json::to_string_pretty(&report).map_err(Failure::runtime)?));
    }
    let rows: Vec<Vec<String>> = report
        .per_stage
        .iter()
        .map(|s| vec![s.stage.clone(), s.params.to_string(), s.flops.to_string()])
        .collect();
    emit(format!(
        "{}total: {} params, {} flops (MACs) at image size {}\n",
        render_table(&["stage", "params", "flops"], &rows),
        report.total_params,
        report.total_flops,
        report.image_size
    ))
}

fn plan_rows(plans: &[StagePlan]) -> Vec<Vec<String>> {
    plans
        .iter()
        .map(|p| {
            vec![
                p.stage.to_string(),
                p.image_size.to_string(),
                p.steps.to_string(),
                format!("{:.4}", p.regs.dropout),
                format!("{:.4}", p.regs.randaug),
                format!("{:.4}", p.regs.mixup),
            ]
        })
        .collect()
}

pub fn schedule(args: &ScheduleArgs) -> CmdResult {
    let sched: StageSchedule = match (&args.preset, &args.config) {
        (Some(name), None) => StageSchedule::preset(name, args.total_steps, args.stages)
            .map_err(Failure::validation)?,
        (None, Some(path)) => RunConfig::load(path)?.schedule,
        _ => return Err(Failure::Validation("give exactly one of --preset or --config".into())),
    };
    let plans = if args.vanilla { vanilla_progressive(&sched) } else { make_schedule(&sched) }
        .map_err(Failure::validation)?;
    if args.json {
        emit(format!("{}\n", serde_json::to_string_pretty(&plans).map_err(Failure::runtime)?))
    } else {
        emit(render_table(
            &["stage", "image_size", "steps", "dropout", "randaug", "mixup"],
            &plan_rows(&plans),
        ))
    }
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_overrides(args.seed, args.epochs);
    let train_cfg = cfg.effective_train();
    let arch = resolve_arch(&cfg.arch, cfg.num_classes())?;
    let data = load_dataset(&cfg.dataset, &cfg.synthetic, train_cfg.seed)?;
    let steps_per_epoch = train_cfg.steps_per_epoch(data.train.len());
    let plans =
        resolve_plans(&train_cfg, &cfg.schedule, steps_per_epoch).map_err(Failure::validation)?;
    let out = resolve_output_dir(args.output.clone(), cfg.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(Failure::runtime)?;

    let mut session = TrainSession::<f32>::new(&arch, data, plans, train_cfg)
        .map_err(Failure::validation)?;
    session.run(None).map_err(Failure::runtime)?;

    session.metrics().write_csv(&out.join("metrics.csv")).map_err(Failure::runtime)?;
    session
        .save_checkpoint(&checkpoint_path(&out, session.step()))
        .map_err(Failure::runtime)?;
    let summary = serde_json::json!({
        "arch": cfg.arch,
        "dataset": cfg.dataset,
        "steps": session.step(),
        "stopped_early": session.stopped_early(),
        "train_seconds": session.metrics().total_seconds(),
        "final_minival_accuracy": session.metrics().final_minival(),
        "final_eval_accuracy": session.metrics().final_eval(),
    });
    let summary_text = serde_json::to_string_pretty(&summary).map_err(Failure::runtime)?;
    std::fs::write(out.join("summary.json"), &summary_text).map_err(Failure::runtime)?;
    emit(format!("{summary_text}\n"))
}

pub fn nas(args: &NasArgs) -> CmdResult {
    let backbone = resolve_arch(&args.backbone, args.classes)?;
    if backbone.num_classes != args.classes {
        return Err(Failure::Validation(format!(
            "backbone file declares {} classes but --classes is {}",
            backbone.num_classes, args.classes
        )));
    }
    let space = SearchSpace::full(backbone, args.layer_delta);
    let spec = SyntheticSpec {
        num_classes: args.classes,
        train: args.train_images,
        eval: args.eval_images,
        ..SyntheticSpec::default()
    };
    let dataset_name = args.data.as_ref().map_or("synthetic".to_string(), |p| p.display().to_string());
    let data = load_dataset(&dataset_name, &spec, args.seed)?;
    let eval_cfg = EvalConfig {
        epochs: args.epochs,
        image_size: args.image_size,
        batch_size: args.batch_size,
        seed: args.seed,
        ..EvalConfig::default()
    };
    let out = resolve_output_dir(args.output.clone(), None);
    std::fs::create_dir_all(&out).map_err(Failure::runtime)?;

    let outcome = random_search(&space, args.budget, &data, &eval_cfg, Some(&out.join("trace.jsonl")))
        .map_err(Failure::runtime)?;

    let front: Vec<_> = outcome.pareto.iter().map(|&i| &outcome.candidates[i]).collect();
    let summary = serde_json::json!({
        "budget": args.budget,
        "seed": args.seed,
        "reward_params": outcome.reward_params,
        "pareto_indices": outcome.pareto,
        "pareto": front,
        "best": outcome.best(),
    });
    std::fs::write(
        out.join("pareto.json"),
        serde_json::to_string_pretty(&summary).map_err(Failure::runtime)?,
    )
    .map_err(Failure::runtime)?;

    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let rows: Vec<Vec<String>> = outcome
        .candidates
        .iter()
        .enumerate()
        .take(8)
        .map(|(rank, c)| {
            vec![
                rank.to_string(),
                c.index.to_string(),
                fmt_opt(c.reward),
                fmt_opt(c.accuracy),
                fmt_opt(c.step_cost),
                fmt_opt(c.params),
                if c.diverged { "diverged".into() } else { String::new() },
            ]
        })
        .collect();
    emit(format!(
        "{}{} candidates evaluated; pareto front size {}; trace and summary in {}\n",
        render_table(&["rank", "sample", "reward", "accuracy", "step_cost", "params", "flags"], &rows),
        outcome.candidates.len(),
        outcome.pareto.len(),
        out.display()
    ))
}

pub fn export(args: &ExportArgs) -> CmdResult {
    let metrics = Metrics::read_csv(&args.metrics).map_err(Failure::validation)?;
    match args.format {
        ExportFormat::Json => {
            let text = serde_json::to_string_pretty(&metrics.rows).map_err(Failure::runtime)?;
            match &args.out {
                Some(path) => write_under_parent(path, &text)?,
                None => emit(format!("{text}\n"))?,
            }
        }
        ExportFormat::Csv => {
            let path = args.out.as_ref().ok_or_else(|| {
                Failure::Validation("--format csv needs --out (CSV is not written to stdout)".into())
            })?;
            metrics.write_csv(path).map_err(Failure::runtime)?;
        }
    }
    Ok(())
}

fn write_under_parent(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Failure::runtime)?;
    }
    std::fs::write(path, text).map_err(Failure::runtime)?;
    Ok(())
}
