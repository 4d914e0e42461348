//! Scratch probe used while sizing test budgets. Not part of the test suite.
use std::time::Instant;

use effnetv2::arch::preset;
use effnetv2::augment::{synthetic_bundle, SyntheticSpec};
use effnetv2::schedule::{RegMagnitudes, StageSchedule};
use effnetv2::trainer::{resolve_plans, train, LrMode, ScheduleMode, TrainConfig};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "c6" => c6(),
        "c7" => c7(),
        "c8" => c8(),
        "c10" => c10(),
        _ => eprintln!("usage: steptime c6|c7"),
    }
}

fn c6() {
    let arch = preset("tiny", 10).unwrap();
    let spec = SyntheticSpec { num_classes: 10, train: 256, eval: 64, image_size: 32, snr: 5.0 };
    let data = synthetic_bundle(&spec, 60).unwrap();
    let sched = StageSchedule {
        total_steps: 32,
        num_stages: 4,
        size_min: 64,
        size_max: 160,
        reg_min: RegMagnitudes::ZERO,
        reg_max: RegMagnitudes::ZERO,
    };
    let mut cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr_mode: LrMode::Cosine,
        lr_peak: 0.01,
        warmup_epochs: 0.0,
        bn_momentum: 0.9,
        stochastic_depth_survival: 1.0,
        seed: 6,
        ..TrainConfig::default()
    };
    for mode in [ScheduleMode::ProgressiveAdaptive, ScheduleMode::Fixed] {
        cfg.schedule_mode = mode;
        let plans = resolve_plans(&cfg, &sched, 32).unwrap();
        let wall = Instant::now();
        let s = train::<f32>(&arch, data.clone(), plans, cfg.clone()).unwrap();
        println!(
            "{mode:?}: steps {} train_seconds {:.2} wall {:.2}",
            s.metrics().rows.len(),
            s.metrics().total_seconds(),
            wall.elapsed().as_secs_f64()
        );
    }
}

fn c7() {
    let arch = preset("tiny", 10).unwrap();
    let spec = SyntheticSpec { num_classes: 10, train: 512, eval: 128, image_size: 32, snr: 5.5 };
    let data = synthetic_bundle(&spec, 7).unwrap();
    let sched = StageSchedule {
        total_steps: 384,
        num_stages: 4,
        size_min: 16,
        size_max: 32,
        reg_min: RegMagnitudes { dropout: 0.05, randaug: 1.0, mixup: 0.0 },
        reg_max: RegMagnitudes { dropout: 0.25, randaug: 8.0, mixup: 0.15 },
    };
    for mode in [ScheduleMode::ProgressiveAdaptive, ScheduleMode::ProgressiveVanilla] {
        for seed in [0u64, 1, 2] {
            let cfg = TrainConfig {
                epochs: 12,
                batch_size: 16,
                lr_mode: LrMode::Cosine,
                lr_peak: 0.02,
                warmup_epochs: 0.0,
                bn_momentum: 0.9,
                ema_decay: 0.99,
                stochastic_depth_survival: 1.0,
                schedule_mode: mode,
                seed,
                ..TrainConfig::default()
            };
            let plans = resolve_plans(&cfg, &sched, 32).unwrap();
            let wall = Instant::now();
            let s = train::<f32>(&arch, data.clone(), plans, cfg).unwrap();
            println!(
                "{mode:?} seed {seed}: minival {:?} eval {:?} wall {:.1}s",
                s.metrics().final_minival(),
                s.metrics().final_eval(),
                wall.elapsed().as_secs_f64()
            );
        }
    }
}

fn c8() {
    use effnetv2::nas::{random_search, EvalConfig, SearchSpace};
    let spec = SyntheticSpec { num_classes: 4, train: 128, eval: 32, image_size: 32, snr: 5.0 };
    let data = synthetic_bundle(&spec, 8).unwrap();
    let space = SearchSpace::full(preset("tiny", 4).unwrap(), 1);
    let eval_cfg = EvalConfig {
        epochs: 1,
        image_size: 32,
        batch_size: 8,
        lr: 0.01,
        bn_momentum: 0.9,
        timing_repeats: 21,
        memory_budget_bytes: 4 << 30,
        seed: 8,
    };
    let wall = Instant::now();
    let a = random_search(&space, 16, &data, &eval_cfg, None).unwrap();
    let t1 = wall.elapsed().as_secs_f64();
    let b = random_search(&space, 16, &data, &eval_cfg, None).unwrap();
    let t2 = wall.elapsed().as_secs_f64() - t1;
    println!("search walls: {t1:.1}s / {t2:.1}s; pareto {:?}", a.pareto);
    for (x, y) in a.candidates.iter().zip(&b.candidates) {
        let (sa, sb) = (x.step_seconds.unwrap(), y.step_seconds.unwrap());
        let rel = (sa - sb).abs() / sa.max(sb);
        println!(
            "idx {:2} acc {:?} err {:?} step_seconds {:.4} vs {:.4} (rel {:.3})",
            x.index, x.accuracy, x.error, sa, sb, rel
        );
    }
}

fn c10() {
    use effnetv2::augment::{load_cifar10, synthetic_cifar_archive};
    let dir = std::env::temp_dir().join("c10-pilot");
    std::fs::create_dir_all(&dir).unwrap();
    let wall = Instant::now();
    synthetic_cifar_archive(&dir, 10, 4.0).unwrap();
    let t_gen = wall.elapsed().as_secs_f64();
    let data = load_cifar10(&dir, 0).unwrap();
    println!(
        "gen {t_gen:.1}s load {:.1}s splits {}/{}/{}",
        wall.elapsed().as_secs_f64() - t_gen,
        data.train.len(),
        data.minival.len(),
        data.eval.len()
    );
    std::fs::remove_dir_all(&dir).ok();
}
