// fine-tune debug: does the modulation latent receive useful gradient?
use std::collections::BTreeMap;
use mapnet::config::*;
use mapnet::data::{Dataset, SplitData, Targets};
use mapnet::optim::{LrSchedule, OptimizerConfig};
use mapnet::train;
use mapnet::zoo::{build_spec, TargetArchitecture};

fn filter(split: &SplitData<f32>, keep: &[usize], base: usize) -> SplitData<f32> {
    let labels = match &split.targets { Targets::Labels(l) => l, _ => unreachable!() };
    let mut inputs = Vec::new();
    let mut out = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if keep.contains(&l) {
            inputs.extend_from_slice(&split.inputs[i * split.width..(i + 1) * split.width]);
            out.push(l - base);
        }
    }
    SplitData { inputs, width: split.width, targets: Targets::Labels(out) }
}

fn main() {
    let full_cfg = DatasetConfig::Idx { dir: "/root/data/mnist".into(), train_limit: Some(20_000), test_limit: None };
    let full = mapnet::data::load::<f32>(&full_cfg).unwrap();
    let low = Dataset { task: full.task, classes: 5, train: filter(&full.train, &[0,1,2,3,4], 0), test: filter(&full.test, &[0,1,2,3,4], 0), name: "m04".into() };
    let high = Dataset { task: full.task, classes: 5, train: filter(&full.train, &[5,6,7,8,9], 5), test: filter(&full.test, &[5,6,7,8,9], 5), name: "m59".into() };

    let arch = TargetArchitecture::Mlp { input: 784, hidden: vec![128], classes: 5 };
    let mut pre_cfg = RunConfig {
        mode: RunMode::Baseline,
        variant: ModeVariant::Standard,
        arch: arch.clone(),
        mapping: MappingConfig::default(),
        loss: LossConfig { stability: false, smoothness: false, alignment: false, ..LossConfig::default() },
        optimizer: OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        epochs: 3, batch_size: 125,
        seeds: Seeds::default(),
        precision: mapnet::scalar::Precision::F32,
        clip_norm: Some(5.0),
        lr_schedule: LrSchedule::Constant,
        dataset: full_cfg.clone(),
        eval_every: 3, eval_train: false,
        probe: None, finetune: None, ablation: None,
    };
    let pre = train::train(&pre_cfg, &low, std::path::Path::new("/tmp/ft_pre")).unwrap();
    println!("pretrain test (digits 0-4): {:?}", pre.final_test);

    let spec = build_spec(&arch).unwrap();
    let params = train::materialize_params(&pre_cfg, &spec, &pre.state).unwrap();
    let named: Vec<(String, mapnet::tensor::Tensor<f32>)> = spec.layers().iter().zip(&params).map(|(l, t)| (l.name.clone(), t.clone())).collect();
    mapnet::finetune::export_pretrained(&named, std::path::Path::new("/tmp/ft_pre/p.bin"), std::path::Path::new("/tmp/ft_pre/p.json")).unwrap();

    for (tag, task_only, lr, alpha) in [("full_lr2e3", false, 2e-3, 0.1), ("task_lr5e3", true, 5e-3, 0.1), ("task_lr2e2", true, 2e-2, 0.1)] {
        pre_cfg.mode = RunMode::Slvt;
        let mut cfg = pre_cfg.clone();
        cfg.optimizer = OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        cfg.epochs = 10;
        cfg.eval_every = 2;
        cfg.eval_train = true;
        cfg.loss = LossConfig { stability: !task_only, smoothness: !task_only, alignment: !task_only, ..LossConfig::default() };
        cfg.mapping.alpha = alpha;
        cfg.finetune = Some(FinetuneConfig {
            pretrained_bin: "/tmp/ft_pre/p.bin".into(),
            manifest: "/tmp/ft_pre/p.json".into(),
            selector: vec!["fc1.weight".into(), "fc2.weight".into()],
            group: 32,
            d: 128,
            alpha: 0.1,
            alphas: BTreeMap::new(),
        });
        let dir = format!("/tmp/ft_{tag}");
        let _ = std::fs::remove_dir_all(&dir);
        match mapnet::finetune::finetune(&cfg, &high, std::path::Path::new(&dir)) {
            Ok(out) => println!("FT {tag}: tuned test={:?} frozen={:.2}", out.final_test, out.frozen_test),
            Err(e) => println!("FT {tag}: ERROR {e}"),
        }
    }
}
