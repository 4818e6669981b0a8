// gradient-flow probe: task loss -> z at initialization
use mapnet::data::{gather, load};
use mapnet::config::*;
use mapnet::mapping::generate_all;
use mapnet::tape::Tape;
use mapnet::train;
use mapnet::zoo::{forward_spec, TargetArchitecture};

fn main() {
    let cfg = RunConfig {
        mode: RunMode::Slvt,
        variant: ModeVariant::Standard,
        arch: TargetArchitecture::Mlp { input: 8, hidden: vec![6], classes: 3 },
        mapping: MappingConfig { d: 8, guard_ratio: 1, ..MappingConfig::default() },
        loss: LossConfig { stability: false, smoothness: false, alignment: false, ..LossConfig::default() },
        optimizer: mapnet::optim::OptimizerConfig::Adam { lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        epochs: 1, batch_size: 16,
        seeds: Seeds::default(),
        precision: mapnet::scalar::Precision::F64,
        clip_norm: None,
            lr_schedule: Default::default(),
        dataset: DatasetConfig::Synth {
            recipe: SynthRecipe::GaussianBlobs { classes: 3, dim: 8, per_class_train: 30, per_class_test: 10, separation: 6.0 },
            seed: 9,
        },
        eval_every: 1,
            eval_train: true, probe: None, finetune: None, ablation: None,
    };
    let ds = load::<f64>(&cfg.dataset).unwrap();
    let (state, spec) = train::init_state::<f64>(&cfg).unwrap();
    let plan = state.plan.as_ref().unwrap();
    let batch = gather(&ds.train, &(0..16).collect::<Vec<_>>());

    let mut tape = Tape::<f64>::new();
    let gen = generate_all(&mut tape, plan).unwrap();
    let theta = tape.value(gen.units[0].gen.theta);
    let td = theta.data();
    println!("theta: min {:.5} max {:.5} mean {:.5}", 
        td.iter().cloned().fold(f64::INFINITY, f64::min),
        td.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        td.iter().sum::<f64>()/td.len() as f64);
    let x = tape.constant(batch.inputs.clone());
    let out = forward_spec(&mut tape, &cfg.arch, &spec, &gen.params, x).unwrap();
    let ov = tape.value(out);
    println!("logits row0: {:?}", &ov.data()[..3]);
    println!("logits row5: {:?}", &ov.data()[15..18]);
    let loss = tape.cross_entropy(out, &batch.labels).unwrap();
    println!("task loss: {}", tape.value(loss).item());
    tape.backward(loss).unwrap();
    let gz = tape.grad(gen.units[0].gen.z).unwrap();
    println!("grad z: {:?}", gz.data());
    let gn: f64 = gz.data().iter().map(|v| v*v).sum::<f64>().sqrt();
    println!("|grad z| = {gn:e}");
}
