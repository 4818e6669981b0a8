// inspect logits, per-layer magnitudes, and task gradient at various scales
use mapnet::config::*;
use mapnet::data::{gather, load};
use mapnet::mapping::generate_all;
use mapnet::tape::Tape;
use mapnet::train;
use mapnet::zoo::{forward_spec, TargetArchitecture};

fn main() {
    let d = 512usize;
    let p = 108_632f64;
    let ds_cfg = DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: Some(500), test_limit: Some(100) };
    let ds = load::<f32>(&ds_cfg).unwrap();
    for gain in [0.05f64, 0.18] {
        let out_scale = gain * (p / d as f64).sqrt();
        let cfg = RunConfig {
            mode: RunMode::Slvt,
            variant: ModeVariant::Standard,
            arch: TargetArchitecture::CnnSmall { in_channels: 1, image: 28, c1: 8, c2: 16, kernel: 5, hidden: 394, classes: 10 },
            mapping: MappingConfig { d, out_scale: Some(out_scale), z_init_std: Some(0.5/(d as f64).sqrt()), ..MappingConfig::default() },
            loss: LossConfig { stability: false, smoothness: false, alignment: false, ..LossConfig::default() },
            optimizer: mapnet::optim::OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
            epochs: 1, batch_size: 50,
            seeds: Seeds::default(),
            precision: mapnet::scalar::Precision::F32,
            clip_norm: Some(5.0),
            lr_schedule: Default::default(),
            dataset: ds_cfg.clone(),
            eval_every: 1,
            eval_train: true, probe: None, finetune: None, ablation: None,
        };
        let (state, spec) = train::init_state::<f32>(&cfg).unwrap();
        let plan = state.plan.as_ref().unwrap();
        let batch = gather(&ds.train, &(0..50).collect::<Vec<_>>());
        let mut tape = Tape::<f32>::new();
        let gen = generate_all(&mut tape, plan).unwrap();
        for (l, &pv) in spec.layers().iter().zip(&gen.params) {
            let vd = tape.value(pv);
            let n = vd.numel() as f64;
            let mean: f64 = vd.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var: f64 = vd.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            println!("gain={gain} {:<14} mean {:+.4} std {:.4}", l.name, mean, var.sqrt());
        }
        let x = tape.constant(batch.inputs.clone());
        let out = forward_spec(&mut tape, &cfg.arch, &spec, &gen.params, x).unwrap();
        let ov = tape.value(out);
        println!("gain={gain} logits row0 {:?}", &ov.data()[..10].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
        println!("gain={gain} logits row1 {:?}", &ov.data()[10..20].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
        let task = tape.cross_entropy(out, &batch.labels).unwrap();
        println!("gain={gain} task loss {}", tape.value(task).item());
        tape.backward(task).unwrap();
        let gz = tape.grad(gen.units[0].gen.z).unwrap();
        let gn: f64 = gz.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        println!("gain={gain} |grad z| {gn:e}");
    }
}
