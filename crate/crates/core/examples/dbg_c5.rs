// criterion-5 dress rehearsal: mapped cnn_small, d=2048, full loss,
// full MNIST, 10 epochs
use mapnet::config::*;
use mapnet::data::load;
use mapnet::optim::OptimizerConfig;
use mapnet::train;
use mapnet::zoo::TargetArchitecture;
use std::time::Instant;

fn main() {
    let ds_cfg = DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: None, test_limit: None };
    let ds = load::<f32>(&ds_cfg).unwrap();
    let cfg = RunConfig {
        mode: RunMode::Slvt,
        variant: ModeVariant::Standard,
        arch: TargetArchitecture::CnnSmall { in_channels: 1, image: 28, c1: 8, c2: 16, kernel: 5, hidden: 394, classes: 10 },
        mapping: MappingConfig { d: 2048, ..MappingConfig::default() },
        loss: LossConfig::default(),
        optimizer: OptimizerConfig::Adam { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        epochs: 10, batch_size: 250,
        seeds: Seeds::default(),
        precision: mapnet::scalar::Precision::F32,
        clip_norm: Some(5.0),
            lr_schedule: Default::default(),
        dataset: ds_cfg.clone(),
        eval_every: 1,
        eval_train: false,
        probe: None, finetune: None, ablation: None,
    };
    let t = Instant::now();
    let out = train::train(&cfg, &ds, std::path::Path::new("/tmp/c5_mapped")).unwrap();
    println!("C5 mapped: train={:?} test={:?} wall={:?}", out.final_train, out.final_test, t.elapsed());
}
