// quick probe of mapped-blobs learning dynamics
use mapnet::config::*;
use mapnet::data::load;
use mapnet::optim::OptimizerConfig;
use mapnet::train;
use mapnet::zoo::TargetArchitecture;

fn main() {
    let cfg = RunConfig {
        mode: RunMode::Slvt,
        variant: ModeVariant::Standard,
        arch: TargetArchitecture::Mlp { input: 8, hidden: vec![6], classes: 3 },
        mapping: MappingConfig { d: 8, guard_ratio: 1, ..MappingConfig::default() },
        loss: LossConfig::default(),
        optimizer: OptimizerConfig::Adam { lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        epochs: 30,
        batch_size: 16,
        seeds: Seeds::default(),
        precision: mapnet::scalar::Precision::F32,
        clip_norm: Some(5.0),
            lr_schedule: Default::default(),
        dataset: DatasetConfig::Synth {
            recipe: SynthRecipe::GaussianBlobs { classes: 3, dim: 8, per_class_train: 30, per_class_test: 10, separation: 6.0 },
            seed: 9,
        },
        eval_every: 5,
            eval_train: true,
        probe: None,
        finetune: None,
        ablation: None,
    };
    let ds = load::<f32>(&cfg.dataset).unwrap();
    let out = train::train(&cfg, &ds, std::path::Path::new("/tmp/dbg_run")).unwrap();
    println!("final: train={:?} test={:?}", out.final_train, out.final_test);
}
