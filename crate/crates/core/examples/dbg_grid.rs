// scaling grid: out_scale gain x z-init x lr, task-only and full loss
use mapnet::config::*;
use mapnet::data::load;
use mapnet::optim::OptimizerConfig;
use mapnet::train;
use mapnet::zoo::TargetArchitecture;
use std::time::Instant;

fn main() {
    let d = 512usize;
    let p = 108_632f64;
    let ds_cfg = DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: Some(4000), test_limit: Some(2000) };
    let ds = load::<f32>(&ds_cfg).unwrap();
    for full in [false, true] {
        for gain in [0.09f64, 0.18, 0.36] {
            for lr in [1e-3, 3e-3] {
                let out_scale = gain * (p / d as f64).sqrt();
                let z_std = 0.5 / (d as f64).sqrt();
                let cfg = RunConfig {
                    mode: RunMode::Slvt,
                    variant: ModeVariant::Standard,
                    arch: TargetArchitecture::CnnSmall { in_channels: 1, image: 28, c1: 8, c2: 16, kernel: 5, hidden: 394, classes: 10 },
                    mapping: MappingConfig { d, out_scale: Some(out_scale), z_init_std: Some(z_std), ..MappingConfig::default() },
                    loss: LossConfig { stability: full, smoothness: full, alignment: full, ..LossConfig::default() },
                    optimizer: OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
                    epochs: 4, batch_size: 100,
                    seeds: Seeds::default(),
                    precision: mapnet::scalar::Precision::F32,
                    clip_norm: Some(5.0),
            lr_schedule: Default::default(),
                    dataset: ds_cfg.clone(),
                    eval_every: 4,
            eval_train: true, probe: None, finetune: None, ablation: None,
                };
                let dir = format!("/tmp/grid_{full}_{gain}_{lr}");
                let _ = std::fs::remove_dir_all(&dir);
                let t = Instant::now();
                match train::train(&cfg, &ds, std::path::Path::new(&dir)) {
                    Ok(out) => println!("full={full} gain={gain} lr={lr}: train={:.2?} test={:.2?} ({:.1?})", out.final_train.unwrap(), out.final_test.unwrap(), t.elapsed()),
                    Err(e) => println!("full={full} gain={gain} lr={lr}: ERROR {e}"),
                }
            }
        }
    }
}
