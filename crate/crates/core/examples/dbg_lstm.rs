// mapped-LSTM tuning for the sine surrogate
use mapnet::config::*;
use mapnet::data::load;
use mapnet::optim::OptimizerConfig;
use mapnet::train;
use mapnet::zoo::TargetArchitecture;

fn main() {
    let recipe = SynthRecipe::SineMix {
        points: 900,
        freqs: vec![0.013, 0.037],
        noise: 0.02,
        window: 24,
        horizon: 1,
        split: 0.8,
    };
    let ds_cfg = DatasetConfig::Synth { recipe, seed: 17 };
    let ds = load::<f32>(&ds_cfg).unwrap();
    let arch = TargetArchitecture::Lstm { input: 1, hidden: 32, horizon: 1 };
    for (tag, full, alpha, lr, epochs) in [
        ("full_a01_lr3e3_e200", true, 0.1, 3e-3, 200usize),
        ("full_a01_lr1e2_e200", true, 0.1, 1e-2, 200),
        ("task_a01_lr1e2_e200", false, 0.1, 1e-2, 200),
        ("full_a002_lr1e2_e200", true, 0.02, 1e-2, 200),
    ] {
        let cfg = RunConfig {
            mode: RunMode::Slvt,
            variant: ModeVariant::Standard,
            arch: arch.clone(),
            mapping: MappingConfig { d: 64, alpha, ..MappingConfig::default() },
            loss: LossConfig { stability: full, smoothness: full, alignment: full, ..LossConfig::default() },
            optimizer: OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
            epochs, batch_size: 64,
            seeds: Seeds::default(),
            precision: mapnet::scalar::Precision::F32,
            clip_norm: Some(5.0),
            lr_schedule: Default::default(),
            dataset: ds_cfg.clone(),
            eval_every: epochs, eval_train: false,
            probe: None, finetune: None, ablation: None,
        };
        let dir = format!("/tmp/lstm_{tag}");
        let _ = std::fs::remove_dir_all(&dir);
        match train::train(&cfg, &ds, std::path::Path::new(&dir)) {
            Ok(out) => println!("LSTM {tag}: test mse {:.5}", out.final_test.unwrap()),
            Err(e) => println!("LSTM {tag}: ERROR {e}"),
        }
    }
}
