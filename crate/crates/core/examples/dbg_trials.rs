// dress rehearsal for the heavy acceptance criteria, run sequentially
use mapnet::config::*;
use mapnet::data::load;
use mapnet::optim::{LrSchedule, OptimizerConfig};
use mapnet::train;
use mapnet::zoo::TargetArchitecture;
use std::time::Instant;

fn cnn() -> TargetArchitecture {
    TargetArchitecture::CnnSmall { in_channels: 1, image: 28, c1: 8, c2: 16, kernel: 5, hidden: 394, classes: 10 }
}

fn adam(lr: f64) -> OptimizerConfig {
    OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
}

fn base(mode: RunMode, dataset: DatasetConfig) -> RunConfig {
    RunConfig {
        mode,
        variant: ModeVariant::Standard,
        arch: cnn(),
        mapping: MappingConfig { d: 2048, ..MappingConfig::default() },
        loss: LossConfig {
            stability: mode != RunMode::Baseline,
            smoothness: mode != RunMode::Baseline,
            alignment: mode != RunMode::Baseline,
            ..LossConfig::default()
        },
        optimizer: adam(2e-3),
        epochs: 10,
        batch_size: 250,
        seeds: Seeds::default(),
        precision: mapnet::scalar::Precision::F32,
        clip_norm: Some(5.0),
        lr_schedule: LrSchedule::Cosine,
        dataset,
        eval_every: 1,
        eval_train: false,
        probe: None, finetune: None, ablation: None,
    }
}

fn run(tag: &str, cfg: &RunConfig) {
    let ds = load::<f32>(&cfg.dataset).unwrap();
    let dir = format!("/tmp/trial_{tag}");
    let _ = std::fs::remove_dir_all(&dir);
    let t = Instant::now();
    match train::train(cfg, &ds, std::path::Path::new(&dir)) {
        Ok(out) => {
            let best = out.records.iter().filter_map(|r| r.test_metric).fold(f64::MIN, f64::max);
            println!(
                "TRIAL {tag}: final train={:?} test={:?} best_test={best:.2} wall={:?}",
                out.final_train, out.final_test, t.elapsed()
            );
        }
        Err(e) => println!("TRIAL {tag}: ERROR {e}"),
    }
}

fn main() {
    let mnist = DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: None, test_limit: None };
    let fmnist10k = DatasetConfig::Idx { dir: "/root/data/fmnist".into(), train_limit: Some(10_000), test_limit: None };

    // c5: mapped full-loss MNIST, cosine
    run("c5_mapped", &base(RunMode::Slvt, mnist.clone()));

    // c6: FMNIST mapped task-only to high train accuracy + baseline arm
    let mut c6m = base(RunMode::Slvt, fmnist10k.clone());
    c6m.loss.stability = false;
    c6m.loss.smoothness = false;
    c6m.loss.alignment = false;
    c6m.epochs = 70;
    c6m.batch_size = 125;
    c6m.eval_every = 10;
    c6m.eval_train = true;
    run("c6_mapped", &c6m);
    let mut c6b = base(RunMode::Baseline, fmnist10k.clone());
    c6b.epochs = 12;
    c6b.batch_size = 125;
    c6b.optimizer = adam(1e-3);
    c6b.eval_every = 4;
    c6b.eval_train = true;
    run("c6_baseline", &c6b);

    // c7/c8 at d=1024: task-only, full (alpha 0.1), full (alpha 0)
    let mut c7 = base(RunMode::Slvt, fmnist10k);
    c7.mapping.d = 1024;
    c7.epochs = 30;
    c7.batch_size = 125;
    c7.eval_every = 10;
    let mut c7_task = c7.clone();
    c7_task.loss.stability = false;
    c7_task.loss.smoothness = false;
    c7_task.loss.alignment = false;
    run("c7_task", &c7_task);
    run("c7_full_a01", &c7);
    let mut c8_a0 = c7.clone();
    c8_a0.mapping.alpha = 0.0;
    run("c8_full_a0", &c8_a0);
}
