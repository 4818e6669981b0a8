//! Training loop, gradient routing, evaluation, checkpointing, metrics,
//! pruning, and the ablation sweep harness.
//!
//! One step is one tape: generate parameters from the latents (or use the
//! directly trained buffers in baseline mode), run the target forward,
//! assemble the composite loss, backward, and update exactly the declared
//! trainable set. A gradient audit at step 0 and step 100 asserts that the
//! set of gradient-bearing nodes equals that declared set, which is how
//! "gradients reach the latents and coefficients only" stays enforced.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointData};
use crate::config::{AblationCell, ModeVariant, RunConfig, RunMode};
use crate::data::{batches, gather, Batch, Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::loss::{
    alignment_loss, alignment_unit_term, smoothness_loss, smoothness_unit_exact,
    smoothness_unit_hutchinson, stability_loss, task_loss, task_loss_mse, total_loss, CoeffState,
    SmoothMode,
};
use crate::mapping::{
    generate, generate_dense, generate_separate_mod, lwt_plan, partition_range,
    slvt_plan, GenHyper, Generated, GenerationOutput, MappingPlan, UnitGen,
};
use crate::optim::{clip_global_norm, Optimizer};
use crate::probe::{self, SnapshotLog};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::zoo::{build_spec, forward_spec, init_params, ParameterSpec};

/// One evaluation point in the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    /// Epoch-mean loss terms (task, stability, smoothness, alignment, total).
    pub losses: BTreeMap<String, f64>,
    /// Effective coefficients exp(-s) at record time.
    pub lambdas: BTreeMap<String, f64>,
    /// Accuracy in percent (classification) or MSE (regression).
    pub train_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub trainable_params: usize,
    pub wall_clock_s: f64,
    pub peak_mem_mb: f64,
}

/// Mutable training state; everything a checkpoint captures.
pub struct TrainState<F> {
    pub plan: Option<MappingPlan<F>>,
    /// Directly trained flat layer buffers (baseline mode).
    pub baseline: Vec<Vec<F>>,
    /// Variant buffers: one modulator or dense matrix per unit.
    pub extras: Vec<Vec<F>>,
    pub coeffs: CoeffState<F>,
    pub opt: Optimizer<F>,
    pub step: u64,
    pub epoch: usize,
    pub data_rng: SeedRng,
    pub noise_rng: SeedRng,
}

pub struct TrainOutput<F> {
    pub state: TrainState<F>,
    pub spec: ParameterSpec,
    pub checkpoint: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub trainable_params: usize,
    pub final_train: Option<f64>,
    pub final_test: Option<f64>,
}

/// Stability perturbation std: explicit config value, or 10% of the
/// smallest unit's resolved latent init scale.
pub fn resolve_sigma<F: Scalar>(cfg: &RunConfig, plan: &MappingPlan<F>) -> f64 {
    cfg.loss.sigma_noise.unwrap_or_else(|| {
        plan.units
            .iter()
            .map(|u| {
                let (_, z_std) =
                    crate::mapping::default_scales(u.state.p(), u.state.d(), cfg.mapping.alpha);
                let z_std = cfg.mapping.z_init_std.unwrap_or(z_std);
                0.1 * z_std
            })
            .fold(f64::INFINITY, f64::min)
    })
}

fn hyper_from_cfg<F: Scalar>(cfg: &RunConfig) -> GenHyper<F> {
    GenHyper {
        alpha: F::from_f64(cfg.mapping.alpha),
        activation: cfg.mapping.activation,
        out_scale: cfg.mapping.out_scale.map(F::from_f64),
        z_init_std: cfg.mapping.z_init_std.map(F::from_f64),
        guard_ratio: cfg.mapping.guard_ratio,
    }
}

/// Build fresh training state from a validated config.
pub fn init_state<F: Scalar>(cfg: &RunConfig) -> Result<(TrainState<F>, ParameterSpec)> {
    let spec = build_spec(&cfg.arch)?.with_lrd(&cfg.mapping.lrd)?;
    let mut z_rng = SeedRng::substream(cfg.seeds.init, 100);
    let mut extra_rng = SeedRng::substream(cfg.seeds.init, 102);

    let mut plan = None;
    let mut baseline = Vec::new();
    let mut extras = Vec::new();

    match cfg.mode {
        RunMode::Baseline => {
            let mut init_rng = SeedRng::substream(cfg.seeds.init, 101);
            baseline = init_params::<F>(&cfg.arch, &mut init_rng)?
                .into_iter()
                .map(|t| t.data().to_vec())
                .collect();
        }
        RunMode::Slvt | RunMode::Lwt | RunMode::Ablation => {
            let hyper = hyper_from_cfg::<F>(cfg);
            let p = if cfg.mode == RunMode::Lwt {
                lwt_plan(&spec, cfg.mapping.d, &hyper, cfg.seeds.init, &mut z_rng)?
            } else {
                slvt_plan(&spec, cfg.mapping.d, &hyper, cfg.seeds.init, &mut z_rng)?
            };
            match cfg.variant {
                ModeVariant::Standard => {}
                ModeVariant::LvWmap => {
                    for u in &p.units {
                        let (_, std_default) = crate::mapping::default_scales(
                            u.state.p(),
                            u.state.d(),
                            cfg.mapping.alpha,
                        );
                        let std = cfg.mapping.z_init_std.unwrap_or(std_default);
                        extras.push(
                            (0..u.state.d())
                                .map(|_| F::from_f64(extra_rng.standard_normal() * std))
                                .collect(),
                        );
                    }
                }
                ModeVariant::FullDnn | ModeVariant::LvFullDnn => {
                    for u in &p.units {
                        extras.push(u.state.w0.data().iter().map(|&v| F::from_f32(v)).collect());
                    }
                }
            }
            plan = Some(p);
        }
    }

    let units = plan.as_ref().map_or(1, |p| p.units.len());
    let coeffs = CoeffState::new(cfg.loss.mask(), units, cfg.loss.per_unit_coeffs);

    let sizes = param_sizes(&plan, &baseline, &extras, &coeffs, cfg);
    let mut opt = Optimizer::new(cfg.optimizer, &sizes);
    opt.set_lr_multipliers(lr_multipliers(&plan, &baseline, &extras, &coeffs, cfg));

    Ok((
        TrainState {
            plan,
            baseline,
            extras,
            coeffs,
            opt,
            step: 0,
            epoch: 0,
            data_rng: SeedRng::substream(cfg.seeds.data_order, 0),
            noise_rng: SeedRng::substream(cfg.seeds.noise, 0),
        },
        spec,
    ))
}

/// Whether each unit's latent is itself trainable under the variant.
fn latent_trainable(variant: ModeVariant) -> bool {
    !matches!(variant, ModeVariant::FullDnn)
}

/// Fixed buffer order: latents (if trainable), extras, baseline layers,
/// coefficient vectors.
fn param_sizes<F: Scalar>(
    plan: &Option<MappingPlan<F>>,
    baseline: &[Vec<F>],
    extras: &[Vec<F>],
    coeffs: &CoeffState<F>,
    cfg: &RunConfig,
) -> Vec<usize> {
    let mut sizes = Vec::new();
    if let Some(p) = plan {
        if latent_trainable(cfg.variant) {
            sizes.extend(p.units.iter().map(|u| u.state.d()));
        }
    }
    sizes.extend(extras.iter().map(Vec::len));
    sizes.extend(baseline.iter().map(Vec::len));
    for s in [&coeffs.s_stab, &coeffs.s_smooth, &coeffs.s_align] {
        if let Some(v) = s {
            sizes.push(v.len());
        }
    }
    sizes
}

/// Per-buffer learning-rate factors, same order as [`param_sizes`].
/// Latent buffers scale with their resolved init scale (capped at 1) so
/// Adam's per-coordinate step stays a small fraction of the coordinates
/// it moves; every other buffer uses the configured rate as is.
fn lr_multipliers<F: Scalar>(
    plan: &Option<MappingPlan<F>>,
    baseline: &[Vec<F>],
    extras: &[Vec<F>],
    coeffs: &CoeffState<F>,
    cfg: &RunConfig,
) -> Vec<f64> {
    let mut mults = Vec::new();
    if let Some(p) = plan {
        if latent_trainable(cfg.variant) {
            for u in &p.units {
                let norm_scale = u.state.z_init_std.to_f64() * (u.state.d() as f64).sqrt();
                mults.push(norm_scale.min(1.0).max(1e-12));
            }
        }
    }
    mults.extend(std::iter::repeat(1.0).take(extras.len() + baseline.len()));
    for s in [&coeffs.s_stab, &coeffs.s_smooth, &coeffs.s_align] {
        if s.is_some() {
            mults.push(1.0);
        }
    }
    mults
}

/// Total trainable scalars the run declares; audited against the
/// optimizer slots at step 0.
pub fn trainable_count<F: Scalar>(state: &TrainState<F>, cfg: &RunConfig) -> usize {
    let mut n = 0;
    if let Some(p) = &state.plan {
        if latent_trainable(cfg.variant) {
            n += p.latent_count();
        }
    }
    n += state.extras.iter().map(Vec::len).sum::<usize>();
    n += state.baseline.iter().map(Vec::len).sum::<usize>();
    n + state.coeffs.scalar_count()
}

// ── graph construction ──────────────────────────────────────────────

struct GraphOut {
    registry: Vec<Var>,
    gen: Option<GenerationOutput>,
    params: Vec<Var>,
}

/// Add generation (or baseline leaves) to a tape, returning the trainable
/// leaf registry in param order and the target parameter vars.
fn add_params_graph<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &RunConfig,
    spec: &ParameterSpec,
    state: &TrainState<F>,
) -> Result<GraphOut> {
    let mut registry = Vec::new();
    match (&state.plan, cfg.mode) {
        (None, _) => {
            let mut params = Vec::with_capacity(spec.layers().len());
            for (l, buf) in spec.layers().iter().zip(&state.baseline) {
                let leaf = tape.leaf(Tensor::new(l.shape.clone(), buf.clone())?, true);
                registry.push(leaf);
                params.push(leaf);
            }
            Ok(GraphOut {
                registry,
                gen: None,
                params,
            })
        }
        (Some(plan), _) => {
            let mut units = Vec::with_capacity(plan.units.len());
            let mut params = Vec::with_capacity(spec.layers().len());
            let mut latent_leaves = Vec::new();
            let mut extra_leaves = Vec::new();
            for (ui, u) in plan.units.iter().enumerate() {
                let trainable = latent_trainable(cfg.variant);
                let z = tape.leaf(u.state.z_tensor(), trainable);
                if trainable {
                    latent_leaves.push(z);
                }
                let g: Generated = match cfg.variant {
                    ModeVariant::Standard => generate(tape, &u.state, z)?,
                    ModeVariant::LvWmap => {
                        let m = tape.leaf(Tensor::from_vec(state.extras[ui].clone()), true);
                        extra_leaves.push(m);
                        generate_separate_mod(tape, &u.state, z, m)?
                    }
                    ModeVariant::FullDnn | ModeVariant::LvFullDnn => {
                        let w = tape.leaf(
                            Tensor::new(
                                vec![u.state.p(), u.state.d()],
                                state.extras[ui].clone(),
                            )?,
                            true,
                        );
                        extra_leaves.push(w);
                        let (out_scale, _) = (u.state.out_scale, ());
                        generate_dense(tape, w, z, u.state.alpha, u.state.activation, out_scale)?
                    }
                };
                let layer_vars =
                    partition_range(tape, g.theta, spec, u.layer_range.clone(), u.offset)?;
                params.extend(layer_vars);
                units.push(UnitGen { gen: g });
            }
            registry.extend(latent_leaves);
            registry.extend(extra_leaves);
            Ok(GraphOut {
                registry,
                gen: Some(GenerationOutput { units, params: Vec::new() }),
                params,
            })
        }
    }
}

struct StepGraph<F> {
    tape: Tape<F>,
    loss: Var,
    registry: Vec<Var>,
    term_values: BTreeMap<String, f64>,
}

fn build_step_graph<F: Scalar>(
    cfg: &RunConfig,
    spec: &ParameterSpec,
    state: &TrainState<F>,
    batch: &Batch<F>,
    noise_rng: &mut SeedRng,
) -> Result<StepGraph<F>> {
    let mut tape = Tape::new();
    let mut out = add_params_graph(&mut tape, cfg, spec, state)?;
    let x = tape.constant(batch.inputs.clone());
    let logits = forward_spec(&mut tape, &cfg.arch, spec, &out.params, x)?;

    let task = match &batch.values {
        None => task_loss(&mut tape, logits, &batch.labels)?,
        Some(v) => {
            let target = tape.constant(v.clone());
            task_loss_mse(&mut tape, logits, target)?
        }
    };
    let mut term_values = BTreeMap::new();
    term_values.insert("task".to_string(), tape.value(task).item().to_f64());

    let mut pairs: Vec<(Var, Var)> = Vec::new();
    let mut coeff_leaves: Vec<Var> = Vec::new();
    if let (Some(plan), Some(gen)) = (&state.plan, &out.gen) {
        let mask = cfg.loss.mask();
        if mask.stability {
            let sigma = resolve_sigma(cfg, plan);
            let term = stability_loss(
                &mut tape,
                &cfg.arch,
                plan,
                gen,
                x,
                logits,
                sigma,
                noise_rng,
            )?;
            term_values.insert("stability".into(), tape.value(term).item().to_f64());
            let s = tape.leaf(
                Tensor::from_vec(state.coeffs.s_stab.clone().expect("mask on")),
                true,
            );
            coeff_leaves.push(s);
            pairs.push((term, s));
        }
        if mask.smoothness {
            let s_vals = state.coeffs.s_smooth.clone().expect("mask on");
            let s_leaf = tape.leaf(Tensor::from_vec(s_vals.clone()), true);
            coeff_leaves.push(s_leaf);
            if cfg.loss.per_unit_coeffs {
                let mut logged = 0.0;
                for (ui, (u, ug)) in plan.units.iter().zip(&gen.units).enumerate() {
                    let term = match cfg.loss.smooth_mode {
                        SmoothMode::Hutchinson => smoothness_unit_hutchinson(
                            &mut tape,
                            u,
                            &ug.gen,
                            cfg.loss.probes,
                            noise_rng,
                        )?,
                        SmoothMode::Exact => smoothness_unit_exact(&mut tape, u, &ug.gen)?,
                    };
                    logged += tape.value(term).item().to_f64();
                    let si = tape.slice(s_leaf, ui, 1)?;
                    pairs.push((term, si));
                }
                term_values.insert("smoothness".into(), logged);
            } else {
                let term = smoothness_loss(
                    &mut tape,
                    plan,
                    gen,
                    cfg.loss.probes,
                    cfg.loss.smooth_mode,
                    noise_rng,
                )?;
                term_values.insert("smoothness".into(), tape.value(term).item().to_f64());
                pairs.push((term, s_leaf));
            }
        }
        if mask.alignment {
            let s_vals = state.coeffs.s_align.clone().expect("mask on");
            let s_leaf = tape.leaf(Tensor::from_vec(s_vals.clone()), true);
            coeff_leaves.push(s_leaf);
            if cfg.loss.per_unit_coeffs {
                let mut logged = 0.0;
                for (ui, (u, ug)) in plan.units.iter().zip(&gen.units).enumerate() {
                    let (term, _) = alignment_unit_term(&mut tape, u, &ug.gen)?;
                    logged += tape.value(term).item().to_f64();
                    let si = tape.slice(s_leaf, ui, 1)?;
                    pairs.push((term, si));
                }
                term_values.insert("alignment".into(), logged / plan.units.len() as f64);
            } else {
                let (term, _) = alignment_loss(&mut tape, plan, gen)?;
                term_values.insert("alignment".into(), tape.value(term).item().to_f64());
                pairs.push((term, s_leaf));
            }
        }
    }
    let loss = total_loss(&mut tape, task, &pairs)?;
    term_values.insert("total".into(), tape.value(loss).item().to_f64());

    out.registry.extend(coeff_leaves);
    Ok(StepGraph {
        tape,
        loss,
        registry: out.registry,
        term_values,
    })
}

/// One graph build + backward + update, exposed for benchmarks.
#[doc(hidden)]
pub fn debug_step<F: Scalar>(
    cfg: &RunConfig,
    spec: &ParameterSpec,
    state: &mut TrainState<F>,
    batch: &Batch<F>,
    noise_rng: &mut SeedRng,
) -> Result<f64> {
    let mut graph = build_step_graph(cfg, spec, state, batch, noise_rng)?;
    graph.tape.backward(graph.loss)?;
    let grads: Vec<Vec<F>> = graph
        .registry
        .iter()
        .map(|&v| graph.tape.grad(v).expect("leaf gradient").data().to_vec())
        .collect();
    let total = graph.term_values["total"];
    drop(graph);
    let mut bufs: Vec<&mut [F]> = Vec::new();
    if let Some(p) = state.plan.as_mut() {
        if latent_trainable(cfg.variant) {
            for u in p.units.iter_mut() {
                bufs.push(u.state.z.as_mut_slice());
            }
        }
    }
    for e in state.extras.iter_mut() {
        bufs.push(e.as_mut_slice());
    }
    for b in state.baseline.iter_mut() {
        bufs.push(b.as_mut_slice());
    }
    for s in [
        state.coeffs.s_stab.as_mut(),
        state.coeffs.s_smooth.as_mut(),
        state.coeffs.s_align.as_mut(),
    ]
    .into_iter()
    .flatten()
    {
        bufs.push(s.as_mut_slice());
    }
    state.opt.step(&mut bufs, &grads);
    Ok(total)
}

// ── evaluation ──────────────────────────────────────────────────────

/// Materialize the target parameters as plain tensors (regenerating from
/// the latents in mapped modes).
pub fn materialize_params<F: Scalar>(
    cfg: &RunConfig,
    spec: &ParameterSpec,
    state: &TrainState<F>,
) -> Result<Vec<Tensor<F>>> {
    let mut tape = Tape::new();
    let out = add_params_graph(&mut tape, cfg, spec, state)?;
    Ok(out
        .params
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}

/// Deterministic metric over a split: accuracy in percent for
/// classification, MSE for regression. Consumes no randomness.
pub fn evaluate_params<F: Scalar>(
    cfg: &RunConfig,
    spec: &ParameterSpec,
    params: &[Tensor<F>],
    ds: &Dataset<F>,
    split: Split,
) -> Result<f64> {
    let sd = ds.split(split);
    let n = sd.len();
    if n == 0 {
        return Err(Error::Data(format!("empty split {split:?}")));
    }
    let bs = cfg.batch_size.max(1);
    let mut correct = 0usize;
    let mut sq_err = 0.0f64;
    let mut seen = 0usize;
    let idx_all: Vec<usize> = (0..n).collect();
    for chunk in idx_all.chunks(bs) {
        let batch = gather(sd, chunk);
        let mut tape = Tape::new();
        let params_v: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(batch.inputs.clone());
        let out = forward_spec(&mut tape, &cfg.arch, spec, &params_v, x)?;
        let ov = tape.value(out);
        match ds.task {
            TaskKind::Classification => {
                let classes = ov.shape()[1];
                for (row, &label) in ov.data().chunks(classes).zip(&batch.labels) {
                    let mut best = 0usize;
                    for (c, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = c;
                        }
                    }
                    if best == label {
                        correct += 1;
                    }
                }
            }
            TaskKind::Regression => {
                let tgt = batch.values.as_ref().expect("regression targets");
                for (p, t) in ov.data().iter().zip(tgt.data()) {
                    let d = p.to_f64() - t.to_f64();
                    sq_err += d * d;
                }
            }
        }
        seen += chunk.len();
    }
    Ok(match ds.task {
        TaskKind::Classification => 100.0 * correct as f64 / seen as f64,
        TaskKind::Regression => sq_err / seen as f64,
    })
}

/// Evaluate the current state on a split.
pub fn evaluate<F: Scalar>(
    cfg: &RunConfig,
    spec: &ParameterSpec,
    state: &TrainState<F>,
    ds: &Dataset<F>,
    split: Split,
) -> Result<f64> {
    let params = materialize_params(cfg, spec, state)?;
    evaluate_params(cfg, spec, &params, ds, split)
}

/// Train accuracy minus test accuracy, in percentage points.
pub fn overfit_gap(train_metric: f64, test_metric: f64) -> f64 {
    train_metric - test_metric
}

/// Magnitude-based unstructured pruning across all parameter tensors
/// jointly: exactly ceil(fraction * n) entries of smallest magnitude are
/// zeroed (ties broken by position). Evaluation-time only.
pub fn prune_mask<F: Scalar>(params: &[Tensor<F>], fraction: f64) -> Result<Vec<Tensor<F>>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "prune fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let total: usize = params.iter().map(Tensor::numel).sum();
    let kill = (fraction * total as f64).ceil() as usize;
    if kill == 0 {
        return Ok(params.to_vec());
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat_idx = 0usize;
    for t in params {
        for v in t.data() {
            order.push((v.to_f64().abs(), flat_idx));
            flat_idx += 1;
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut zero = vec![false; total];
    for &(_, idx) in order.iter().take(kill) {
        zero[idx] = true;
    }
    let mut out = Vec::with_capacity(params.len());
    let mut base = 0usize;
    for t in params {
        let data: Vec<F> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if zero[base + i] { F::ZERO } else { v })
            .collect();
        base += t.numel();
        out.push(Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

// ── the loop ────────────────────────────────────────────────────────

fn check_finite(values: &BTreeMap<String, f64>, step: u64, out_dir: &Path) -> Result<()> {
    if values.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    let dump = serde_json::json!({ "step": step, "losses": values });
    let path = out_dir.join("abort.json");
    let _ = std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap());
    Err(Error::Numeric(format!(
        "non-finite loss at step {step}; diagnostics in {}",
        path.display()
    )))
}

fn audit_gradients<F: Scalar>(tape: &Tape<F>, registry: &[Var], step: u64) -> Result<()> {
    let mut expected: Vec<usize> = registry.iter().map(|v| v.index()).collect();
    expected.sort_unstable();
    let bearing = tape.grad_bearing_indices();
    if bearing != expected {
        return Err(Error::Contract(format!(
            "gradient audit failed at step {step}: {} gradient-bearing nodes vs {} declared trainables",
            bearing.len(),
            expected.len()
        )));
    }
    Ok(())
}

/// Train from the state's current epoch up to `cfg.epochs`.
fn run_epochs<F: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset<F>,
    mut state: TrainState<F>,
    spec: ParameterSpec,
    out_dir: &Path,
) -> Result<TrainOutput<F>> {
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let trainable = trainable_count(&state, cfg);
    let declared: usize = state.opt.m.iter().map(Vec::len).sum();
    if declared != trainable {
        return Err(Error::Contract(format!(
            "optimizer covers {declared} scalars but the declared trainable set has {trainable}"
        )));
    }

    let w0_sums_before = state.plan.as_ref().map(|p| p.w0_checksums());

    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("metrics.jsonl"))?;
    let mut records = Vec::new();

    let mut snapshot_log = match (&cfg.probe, cfg.mode) {
        (Some(pc), RunMode::Baseline) => {
            let names: Vec<(String, usize)> = spec
                .layers()
                .iter()
                .map(|l| (l.name.clone(), l.size()))
                .collect();
            Some((SnapshotLog::new(&names, pc.cap_mb), pc.every_k as u64, pc.components))
        }
        _ => None,
    };
    let record_snapshot = |log: &mut SnapshotLog, step: u64, state: &TrainState<F>| -> Result<()> {
        let layers: Vec<Vec<f64>> = state
            .baseline
            .iter()
            .map(|b| b.iter().map(|v| v.to_f64()).collect())
            .collect();
        log.record(step, &layers)
    };

    let dataset_bytes = (ds.train.inputs.len() + ds.test.inputs.len()) * F::BYTES;
    let matrix_bytes = state.plan.as_ref().map_or(0, |p| p.matrix_bytes());
    let mut peak_tape_bytes = 0usize;

    // Fresh runs calibrate each trainable log-weight so that lambda * term
    // starts at ~1 for large terms (s = ln max(term, 1)). This puts the
    // uncertainty-style weights at their stationary point instead of
    // letting a large regularizer dominate the latent gradient for
    // thousands of steps while s drifts there. Throwaway forward pass; the
    // real noise stream is untouched.
    if state.step == 0 && state.coeffs.scalar_count() > 0 {
        let order = batches(&ds.train, cfg.batch_size, &mut state.data_rng.clone());
        let batch = gather(&ds.train, &order[0]);
        let mut probe_noise = state.noise_rng.clone();
        let graph = build_step_graph(cfg, &spec, &state, &batch, &mut probe_noise)?;
        let calibrated = |term: &str, width: usize| -> Vec<F> {
            let v = graph.term_values.get(term).copied().unwrap_or(0.0);
            let per = if width > 1 { v / width as f64 } else { v };
            vec![F::from_f64(per.max(1.0).ln()); width]
        };
        if let Some(s) = state.coeffs.s_stab.as_mut() {
            *s = calibrated("stability", s.len());
        }
        if let Some(s) = state.coeffs.s_smooth.as_mut() {
            *s = calibrated("smoothness", s.len());
        }
        if let Some(s) = state.coeffs.s_align.as_mut() {
            *s = calibrated("alignment", s.len());
        }
    }

    let mut final_train = None;
    let mut final_test = None;

    let total_steps = {
        let per_epoch = ds.train.len().div_ceil(cfg.batch_size.max(1)) as u64;
        per_epoch * cfg.epochs as u64
    };
    let start_epoch = state.epoch;
    for epoch in start_epoch..cfg.epochs {
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut term_count = 0u64;
        let batch_indices = batches(&ds.train, cfg.batch_size, &mut state.data_rng);
        for idx in &batch_indices {
            if let Some((log, every_k, _)) = snapshot_log.as_mut() {
                if state.step % *every_k == 0 {
                    record_snapshot(log, state.step, &state)?;
                }
            }
            let batch = gather(&ds.train, idx);
            let mut noise = state.noise_rng.clone();
            let mut graph = build_step_graph(cfg, &spec, &state, &batch, &mut noise)?;
            state.noise_rng = noise;
            check_finite(&graph.term_values, state.step, out_dir)?;
            for (k, v) in &graph.term_values {
                *term_sums.entry(k.clone()).or_insert(0.0) += v;
            }
            term_count += 1;
            graph.tape.backward(graph.loss)?;
            if state.step == 0 || state.step == 100 {
                audit_gradients(&graph.tape, &graph.registry, state.step)?;
            }
            peak_tape_bytes = peak_tape_bytes.max(graph.tape.value_bytes());

            let mut grads: Vec<Vec<F>> = graph
                .registry
                .iter()
                .map(|&v| graph.tape.grad(v).expect("leaf gradient").data().to_vec())
                .collect();
            drop(graph);

            // clip the latent block only
            let latent_block = match (&state.plan, latent_trainable(cfg.variant)) {
                (Some(p), true) => p.units.len(),
                _ => 0,
            };
            if let Some(max_norm) = cfg.clip_norm {
                if latent_block > 0 {
                    clip_global_norm(&mut grads[..latent_block], max_norm);
                }
            }

            for g in grads.iter().flat_map(|g| g.iter()) {
                if !g.is_finite() {
                    let mut vals = BTreeMap::new();
                    vals.insert("gradient".to_string(), f64::NAN);
                    check_finite(&vals, state.step, out_dir)?;
                }
            }

            // fixed buffer order must match param_sizes()
            {
                let mut bufs: Vec<&mut [F]> = Vec::new();
                if let Some(p) = state.plan.as_mut() {
                    if latent_trainable(cfg.variant) {
                        for u in p.units.iter_mut() {
                            bufs.push(u.state.z.as_mut_slice());
                        }
                    }
                }
                for e in state.extras.iter_mut() {
                    bufs.push(e.as_mut_slice());
                }
                for b in state.baseline.iter_mut() {
                    bufs.push(b.as_mut_slice());
                }
                for s in [
                    state.coeffs.s_stab.as_mut(),
                    state.coeffs.s_smooth.as_mut(),
                    state.coeffs.s_align.as_mut(),
                ]
                .into_iter()
                .flatten()
                {
                    bufs.push(s.as_mut_slice());
                }
                state.opt.lr_scale = match cfg.lr_schedule {
                    crate::optim::LrSchedule::Constant => 1.0,
                    crate::optim::LrSchedule::Cosine => {
                        let frac = (state.step as f64 / total_steps.max(1) as f64).min(1.0);
                        0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                    }
                };
                state.opt.step(&mut bufs, &grads);
            }
            // Keep effective coefficients in (0, 1]: without a floor the
            // +s surrogate walks s toward ln(term) and a vanishing term
            // would get an unbounded lambda amplifying its gradient.
            for sv in [
                state.coeffs.s_stab.as_mut(),
                state.coeffs.s_smooth.as_mut(),
                state.coeffs.s_align.as_mut(),
            ]
            .into_iter()
            .flatten()
            .flat_map(|v| v.iter_mut())
            {
                if *sv < F::ZERO {
                    *sv = F::ZERO;
                }
            }

            state.step += 1;
        }

        state.epoch = epoch + 1;

        let is_last = epoch + 1 == cfg.epochs;
        let is_eval_epoch = (epoch + 1) % cfg.eval_every == 0 || is_last;
        if is_eval_epoch {
            let params = materialize_params(cfg, &spec, &state)?;
            let train_m = if cfg.eval_train || is_last {
                Some(evaluate_params(cfg, &spec, &params, ds, Split::Train)?)
            } else {
                None
            };
            let test_m = evaluate_params(cfg, &spec, &params, ds, Split::Test)?;
            if train_m.is_some() {
                final_train = train_m;
            }
            final_test = Some(test_m);

            let losses: BTreeMap<String, f64> = term_sums
                .iter()
                .map(|(k, v)| (k.clone(), v / term_count.max(1) as f64))
                .collect();

            let lambdas: BTreeMap<String, f64> = state
                .coeffs
                .lambdas()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            let record = MetricsRecord {
                step: state.step,
                epoch: state.epoch,
                losses,
                lambdas,
                train_metric: train_m,
                test_metric: Some(test_m),
                trainable_params: trainable,
                wall_clock_s: started.elapsed().as_secs_f64(),
                peak_mem_mb: (peak_tape_bytes + matrix_bytes + dataset_bytes) as f64 / (1 << 20) as f64,
            };
            writeln!(metrics_file, "{}", serde_json::to_string(&record).unwrap())?;
            records.push(record);
            eprintln!(
                "epoch {:>3}  step {:>7}  train {}  test {:>8.4}  ({} trainables)",
                state.epoch,
                state.step,
                train_m.map_or_else(|| "    -   ".into(), |v| format!("{v:>8.4}")),
                test_m,
                trainable
            );
        }
    }

    // trailing snapshot when the step count lands on the cadence
    if let Some((log, every_k, _)) = snapshot_log.as_mut() {
        if state.step % *every_k == 0 && state.step > 0 {
            record_snapshot(log, state.step, &state)?;
        }
    }

    if let (Some(before), Some(p)) = (w0_sums_before, state.plan.as_ref()) {
        if before != p.w0_checksums() {
            return Err(Error::Contract(
                "fixed generator matrix changed during training".into(),
            ));
        }
    }

    if let Some((log, _, components)) = snapshot_log {
        let analyses = probe::pca(&log, components)?;
        probe::report(&log, &analyses, &out_dir.join("probe"))?;
    }

    let ck_path = out_dir.join("checkpoint.mnck");
    save_state(&ck_path, cfg, &state)?;

    Ok(TrainOutput {
        state,
        spec,
        checkpoint: ck_path,
        records,
        trainable_params: trainable,
        final_train,
        final_test,
    })
}

/// Validate, initialize, and train a full run, writing the resolved
/// config, metrics stream and final checkpoint into `out_dir`.
pub fn train<F: Scalar>(cfg: &RunConfig, ds: &Dataset<F>, out_dir: &Path) -> Result<TrainOutput<F>> {
    let issues = crate::config::validate(cfg);
    if !issues.is_empty() {
        let msgs: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
        return Err(Error::Config(msgs.join("; ")));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.resolved.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let (state, spec) = init_state(cfg)?;
    run_epochs(cfg, ds, state, spec, out_dir)
}

// ── checkpoint plumbing ─────────────────────────────────────────────

pub fn save_state<F: Scalar>(path: &Path, cfg: &RunConfig, state: &TrainState<F>) -> Result<()> {
    let latents = match (&state.plan, latent_trainable(cfg.variant)) {
        (Some(p), _) => p.units.iter().map(|u| u.state.z.clone()).collect(),
        (None, _) => Vec::new(),
    };
    let mut extras = state.extras.clone();
    extras.extend(state.baseline.iter().cloned());
    let mut coeffs = Vec::new();
    for s in [&state.coeffs.s_stab, &state.coeffs.s_smooth, &state.coeffs.s_align]
        .into_iter()
        .flatten()
    {
        coeffs.push(s.clone());
    }
    let data = CheckpointData {
        config_json: serde_json::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?,
        latents,
        coeffs,
        extras,
        opt_t: state.opt.t,
        opt_m: state.opt.m.clone(),
        opt_v: state.opt.v.clone(),
        step: state.step,
        epoch: state.epoch as u64,
        rng_states: vec![state.data_rng.capture(), state.noise_rng.capture()],
    };
    checkpoint::save(path, &data)
}

/// Read only the embedded config (used to pick the precision before
/// loading scalar payloads).
pub fn peek_config(path: &Path) -> Result<RunConfig> {
    let data = checkpoint::load::<f32>(path).or_else(|_| {
        // scalar sections may be f64; config section is precision-free,
        // so retry with the other width before giving up
        checkpoint::load::<f64>(path).map(|d| CheckpointData {
            config_json: d.config_json,
            latents: Vec::new(),
            coeffs: Vec::new(),
            extras: Vec::new(),
            opt_t: 0,
            opt_m: Vec::new(),
            opt_v: Vec::new(),
            step: 0,
            epoch: 0,
            rng_states: Vec::new(),
        })
    })?;
    serde_json::from_str(&data.config_json)
        .map_err(|e| Error::Format(format!("checkpoint config does not parse: {e}")))
}

/// Rebuild a training state from a checkpoint (matrices regenerate from
/// the seeds embedded in the config).
pub fn load_state<F: Scalar>(path: &Path) -> Result<(RunConfig, TrainState<F>, ParameterSpec)> {
    let data = checkpoint::load::<F>(path)?;
    let cfg: RunConfig = serde_json::from_str(&data.config_json)
        .map_err(|e| Error::Format(format!("checkpoint config does not parse: {e}")))?;
    let (mut state, spec) = init_state::<F>(&cfg)?;

    if let Some(p) = state.plan.as_mut() {
        if data.latents.len() != p.units.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} latent units, config builds {}",
                data.latents.len(),
                p.units.len()
            )));
        }
        for (u, z) in p.units.iter_mut().zip(data.latents) {
            if z.len() != u.state.d() {
                return Err(Error::Format(format!(
                    "unit {}: checkpoint latent has {} entries, expected {}",
                    u.name,
                    z.len(),
                    u.state.d()
                )));
            }
            u.state.z = z;
        }
    }

    let n_extras = state.extras.len();
    let mut stored = data.extras;
    let stored_baseline = stored.split_off(n_extras);
    for (dst, src) in state.extras.iter_mut().zip(stored) {
        if dst.len() != src.len() {
            return Err(Error::Format("variant buffer size mismatch".into()));
        }
        *dst = src;
    }
    if stored_baseline.len() != state.baseline.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} baseline buffers, config builds {}",
            stored_baseline.len(),
            state.baseline.len()
        )));
    }
    for (dst, src) in state.baseline.iter_mut().zip(stored_baseline) {
        if dst.len() != src.len() {
            return Err(Error::Format("baseline buffer size mismatch".into()));
        }
        *dst = src;
    }

    let mut it = data.coeffs.into_iter();
    for s in [
        state.coeffs.s_stab.as_mut(),
        state.coeffs.s_smooth.as_mut(),
        state.coeffs.s_align.as_mut(),
    ]
    .into_iter()
    .flatten()
    {
        *s = it
            .next()
            .ok_or_else(|| Error::Format("missing coefficient buffer in checkpoint".into()))?;
    }

    let mults = lr_multipliers(&state.plan, &state.baseline, &state.extras, &state.coeffs, &cfg);
    state.opt = Optimizer::from_parts(cfg.optimizer, data.opt_m, data.opt_v, data.opt_t);
    state.opt.set_lr_multipliers(mults);
    state.step = data.step;
    state.epoch = data.epoch as usize;
    if data.rng_states.len() != 2 {
        return Err(Error::Format(format!(
            "expected 2 rng states, found {}",
            data.rng_states.len()
        )));
    }
    state.data_rng = SeedRng::restore(&data.rng_states[0]);
    state.noise_rng = SeedRng::restore(&data.rng_states[1]);
    Ok((cfg, state, spec))
}

/// Continue a checkpointed run up to its configured epoch count.
pub fn resume<F: Scalar>(ckpt: &Path, ds: &Dataset<F>, out_dir: &Path) -> Result<TrainOutput<F>> {
    let (cfg, state, spec) = load_state::<F>(ckpt)?;
    run_epochs(&cfg, ds, state, spec, out_dir)
}

// ── ablation sweep ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub cell: String,
    pub mode: String,
    pub variant: String,
    pub trainable_params: usize,
    pub train_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub pruned_test_metric: Option<f64>,
}

/// Derive a cell's config from the base run config. Seeds are shared
/// across cells on purpose.
pub fn derive_cell_config(base: &RunConfig, cell: &AblationCell) -> RunConfig {
    let mut cfg = base.clone();
    cfg.mode = cell.mode.unwrap_or(match base.mode {
        RunMode::Ablation => RunMode::Slvt,
        m => m,
    });
    cfg.ablation = None;
    cfg.probe = None;
    if let Some(v) = cell.stability {
        cfg.loss.stability = v;
    }
    if let Some(v) = cell.smoothness {
        cfg.loss.smoothness = v;
    }
    if let Some(v) = cell.alignment {
        cfg.loss.alignment = v;
    }
    if let Some(a) = cell.alpha {
        cfg.mapping.alpha = a;
    }
    if let Some(v) = cell.variant {
        cfg.variant = v;
        if v != ModeVariant::Standard {
            cfg.loss.stability = false;
            cfg.loss.smoothness = false;
            cfg.loss.alignment = false;
        }
    }
    if let Some(d) = cell.d {
        cfg.mapping.d = d;
    }
    if let Some(l) = &cell.lrd {
        cfg.mapping.lrd = l.clone();
    }
    if cfg.mode == RunMode::Baseline {
        cfg.loss.stability = false;
        cfg.loss.smoothness = false;
        cfg.loss.alignment = false;
        cfg.variant = ModeVariant::Standard;
    }
    cfg
}

/// Run every cell with shared seeds and emit a merged comparison CSV.
pub fn ablation_sweep<F: Scalar>(
    base: &RunConfig,
    ds: &Dataset<F>,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    let cells = base
        .ablation
        .clone()
        .ok_or_else(|| Error::Config("ablation mode needs cells".into()))?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for cell in &cells {
        let cfg = derive_cell_config(base, cell);
        let cell_dir = out_dir.join(&cell.name);
        let out = train(&cfg, ds, &cell_dir)?;
        let pruned_test_metric = match cell.prune {
            Some(fraction) => {
                let params = materialize_params(&cfg, &out.spec, &out.state)?;
                let pruned = prune_mask(&params, fraction)?;
                Some(evaluate_params(&cfg, &out.spec, &pruned, ds, Split::Test)?)
            }
            None => None,
        };
        rows.push(SweepRow {
            cell: cell.name.clone(),
            mode: format!("{:?}", cfg.mode).to_lowercase(),
            variant: format!("{:?}", cfg.variant).to_lowercase(),
            trainable_params: out.trainable_params,
            train_metric: out.final_train,
            test_metric: out.final_test,
            pruned_test_metric,
        });
    }
    let mut csv = String::from(
        "cell,mode,variant,trainable_params,train_metric,test_metric,pruned_test_metric\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.cell,
            r.mode,
            r.variant,
            r.trainable_params,
            r.train_metric.map_or(String::new(), |v| v.to_string()),
            r.test_metric.map_or(String::new(), |v| v.to_string()),
            r.pruned_test_metric.map_or(String::new(), |v| v.to_string()),
        ));
    }
    std::fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}
