// phase timing at acceptance scale: P ~ 108K, d = 2048, batch 250
use mapnet::config::*;
use mapnet::data::{gather, load};
use mapnet::rng::SeedRng;
use mapnet::train;
use mapnet::zoo::TargetArchitecture;
use std::time::Instant;

fn main() {
    let d = 2048usize;
    let ds_cfg = DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: Some(2000), test_limit: Some(500) };
    let ds = load::<f32>(&ds_cfg).unwrap();
    let cfg = RunConfig {
        mode: RunMode::Slvt,
        variant: ModeVariant::Standard,
        arch: TargetArchitecture::CnnSmall { in_channels: 1, image: 28, c1: 8, c2: 16, kernel: 5, hidden: 394, classes: 10 },
        mapping: MappingConfig { d, ..MappingConfig::default() },
        loss: LossConfig::default(),
        optimizer: mapnet::optim::OptimizerConfig::Adam { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        epochs: 1, batch_size: 250,
        seeds: Seeds::default(),
        precision: mapnet::scalar::Precision::F32,
        clip_norm: Some(5.0),
            lr_schedule: Default::default(),
        dataset: ds_cfg.clone(),
        eval_every: 1,
            eval_train: true, probe: None, finetune: None, ablation: None,
    };
    let t0 = Instant::now();
    let (state, _spec) = train::init_state::<f32>(&cfg).unwrap();
    println!("init (orthogonal {}x{}): {:?}", 108_632, d, t0.elapsed());
    let plan = state.plan.as_ref().unwrap();
    let w0 = &plan.units[0].state.w0;

    let x = vec![0.1f32; d];
    let t = Instant::now();
    let y = w0.matvec(&x);
    println!("matvec fwd: {:?}", t.elapsed());
    let t = Instant::now();
    let _ = w0.matvec_t(&y);
    println!("matvec_t:   {:?}", t.elapsed());

    let batch = gather(&ds.train, &(0..250).collect::<Vec<_>>());
    // one full-loss step through the public path
    for tag in ["full", "task"] {
        let mut c2 = cfg.clone();
        if tag == "task" {
            c2.loss.stability = false;
            c2.loss.smoothness = false;
            c2.loss.alignment = false;
        }
        let (mut st2, spec2) = train::init_state::<f32>(&c2).unwrap();
        let t = Instant::now();
        let n = 3;
        for _ in 0..n {
            let mut noise = SeedRng::from_seed(1);
            let g = train::debug_step(&c2, &spec2, &mut st2, &batch, &mut noise).unwrap();
            std::hint::black_box(g);
        }
        println!("{tag} step avg: {:?}", t.elapsed() / n);
    }
}
