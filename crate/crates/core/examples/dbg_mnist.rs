// scale probe: cnn_small on an MNIST subset, full loss vs task-only,
// plus per-term z-gradient norms at step 0
use mapnet::config::*;
use mapnet::data::{gather, load};
use mapnet::mapping::generate_all;
use mapnet::optim::OptimizerConfig;
use mapnet::rng::SeedRng;
use mapnet::tape::Tape;
use mapnet::train;
use mapnet::zoo::{forward_spec, TargetArchitecture};
use std::time::Instant;

fn base_cfg(full: bool) -> RunConfig {
    RunConfig {
        mode: RunMode::Slvt,
        variant: ModeVariant::Standard,
        arch: TargetArchitecture::CnnSmall { in_channels: 1, image: 28, c1: 8, c2: 16, kernel: 5, hidden: 394, classes: 10 },
        mapping: MappingConfig { d: 512, ..MappingConfig::default() },
        loss: LossConfig { stability: full, smoothness: full, alignment: full, ..LossConfig::default() },
        optimizer: OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        epochs: 3, batch_size: 100,
        seeds: Seeds::default(),
        precision: mapnet::scalar::Precision::F32,
        clip_norm: Some(5.0),
            lr_schedule: Default::default(),
        dataset: DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: Some(2000), test_limit: Some(2000) },
        eval_every: 1,
            eval_train: true, probe: None, finetune: None, ablation: None,
    }
}

fn main() {
    // per-term gradient norms at step 0
    let cfg = base_cfg(true);
    let ds = load::<f32>(&cfg.dataset).unwrap();
    let (state, spec) = train::init_state::<f32>(&cfg).unwrap();
    let plan = state.plan.as_ref().unwrap();
    let batch = gather(&ds.train, &(0..100).collect::<Vec<_>>());
    let mut noise = SeedRng::from_seed(3);

    let mut grad_norm = |which: &str| -> f64 {
        let mut tape = Tape::<f32>::new();
        let gen = generate_all(&mut tape, plan).unwrap();
        let x = tape.constant(batch.inputs.clone());
        let out = forward_spec(&mut tape, &cfg.arch, &spec, &gen.params, x).unwrap();
        let term = match which {
            "task" => tape.cross_entropy(out, &batch.labels).unwrap(),
            "stability" => mapnet::loss::stability_loss(&mut tape, &cfg.arch, plan, &gen, x, out, 0.01, &mut noise).unwrap(),
            "smoothness" => mapnet::loss::smoothness_loss(&mut tape, plan, &gen, 1, mapnet::loss::SmoothMode::Hutchinson, &mut noise).unwrap(),
            "alignment" => mapnet::loss::alignment_loss(&mut tape, plan, &gen).unwrap().0,
            _ => unreachable!(),
        };
        let val = tape.value(term).item();
        tape.backward(term).unwrap();
        let g = tape.grad(gen.units[0].gen.z).unwrap();
        let n = g.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        println!("{which:>10}: value {val:.6}  |grad z| {n:.6}");
        n
    };
    let t0 = Instant::now();
    for w in ["task", "stability", "smoothness", "alignment"] { grad_norm(w); }
    println!("4 term-graphs took {:?}", t0.elapsed());

    for full in [false, true] {
        let cfg = base_cfg(full);
        let dir = format!("/tmp/dbg_mnist_{full}");
        let _ = std::fs::remove_dir_all(&dir);
        let t = Instant::now();
        let out = train::train(&cfg, &ds, std::path::Path::new(&dir)).unwrap();
        println!("full={full}: train={:?} test={:?} elapsed={:?}", out.final_train, out.final_test, t.elapsed());
    }
}
