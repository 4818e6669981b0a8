// longer-horizon check: task-only vs full loss vs no-modulation, 12 epochs
use mapnet::config::*;
use mapnet::data::load;
use mapnet::optim::OptimizerConfig;
use mapnet::train;
use mapnet::zoo::TargetArchitecture;
use std::time::Instant;

fn main() {
    let d = 512usize;
    let ds_cfg = DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: Some(4000), test_limit: Some(2000) };
    let ds = load::<f32>(&ds_cfg).unwrap();
    let cells: &[(&str, bool, f64)] = &[
        ("task_a0.1", false, 0.1),
        ("full_a0.1", true, 0.1),
        ("task_a0", false, 0.0),
        ("full_a0", true, 0.0),
    ];
    for &(tag, full, alpha) in cells {
        let cfg = RunConfig {
            mode: RunMode::Slvt,
            variant: ModeVariant::Standard,
            arch: TargetArchitecture::CnnSmall { in_channels: 1, image: 28, c1: 8, c2: 16, kernel: 5, hidden: 394, classes: 10 },
            mapping: MappingConfig { d, alpha, ..MappingConfig::default() },
            loss: LossConfig { stability: full, smoothness: full, alignment: full, ..LossConfig::default() },
            optimizer: OptimizerConfig::Adam { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
            epochs: 36, batch_size: 100,
            seeds: Seeds::default(),
            precision: mapnet::scalar::Precision::F32,
            clip_norm: Some(5.0),
            lr_schedule: Default::default(),
            dataset: ds_cfg.clone(),
            eval_every: 9,
            eval_train: true, probe: None, finetune: None, ablation: None,
        };
        let dir = format!("/tmp/e2_{tag}");
        let _ = std::fs::remove_dir_all(&dir);
        let t = Instant::now();
        match train::train(&cfg, &ds, std::path::Path::new(&dir)) {
            Ok(out) => println!("E2 {tag}: train={:.2} test={:.2} ({:.0?})", out.final_train.unwrap(), out.final_test.unwrap(), t.elapsed()),
            Err(e) => println!("E2 {tag}: ERROR {e}"),
        }
    }
}
