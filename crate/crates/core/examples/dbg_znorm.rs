// inspect latent norms and the shift/variation balance in checkpoints
use mapnet::train;

fn main() {
    for tag in ["task_a0.1", "full_a0.1", "task_a0"] {
        let path = format!("/tmp/e2_{tag}/checkpoint.mnck");
        let (cfg, state, _) = train::load_state::<f32>(std::path::Path::new(&path)).unwrap();
        let plan = state.plan.as_ref().unwrap();
        for u in &plan.units {
            let z2: f64 = u.state.z.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let znorm = z2.sqrt();
            let shift = cfg.mapping.alpha * z2;
            let variation = znorm / (u.state.p() as f64).sqrt();
            println!(
                "{tag}: |z| {:.5}  shift {:.5}  variation {:.5}  shift/var {:.2}  preact_shift*out {:.3}",
                znorm,
                shift,
                variation,
                shift / variation.max(1e-12),
                shift.tanh() * u.state.out_scale as f64,
            );
        }
    }
}
