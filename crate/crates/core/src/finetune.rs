//! Fine-tuning frozen pretrained weights through generated modulation
//! vectors.
//!
//! The selected weights are flattened in spec order (row-major within each
//! tensor) into one buffer W_f. A generator unit emits one modulation
//! element per group of L consecutive weights (the last group may be
//! short), and weight k receives `+ alpha_layer(k) * o[k / L]`. Everything
//! outside the selection stays bit-identical for the whole run; trainable
//! count is d plus the loss coefficients, independent of the model size.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{batches, gather, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{
    alignment_unit_term, smoothness_unit_exact, smoothness_unit_hutchinson, task_loss, total_loss,
    CoeffState, SmoothMode,
};
use crate::mapping::{generate, generate_perturbed, MappingState, PlanUnit};
use crate::optim::{clip_global_norm, Optimizer};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{GroupScale, Tape, Var};
use crate::tensor::{checksum_scalars, Tensor};
use crate::train::MetricsRecord;
use crate::zoo::{build_spec, forward_spec, ParameterSpec};

// ── pretrained import/export ────────────────────────────────────────

/// Manifest describing the raw little-endian blob next to it: named
/// arrays, in order, with shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainedManifest {
    pub entries: Vec<ManifestEntry>,
    /// Scalar width of the blob, "f32" or "f64".
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Write tensors as a manifest + raw blob pair.
pub fn export_pretrained<F: Scalar>(
    named: &[(String, Tensor<F>)],
    bin_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let manifest = PretrainedManifest {
        entries: named
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        dtype: if F::BYTES == 4 { "f32".into() } else { "f64".into() },
    };
    std::fs::write(
        manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let mut blob = Vec::new();
    for (_, t) in named {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    let mut f = std::fs::File::create(bin_path)?;
    f.write_all(&blob)?;
    Ok(())
}

/// Load a manifest + blob pair. Fails with the first diverging entry on a
/// short file and leaves no partial state behind.
pub fn import_pretrained<F: Scalar>(
    bin_path: &Path,
    manifest_path: &Path,
) -> Result<Vec<(String, Tensor<F>)>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: PretrainedManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("manifest dtype {other:?} unsupported"))),
    };
    if width != F::BYTES {
        return Err(Error::Format(format!(
            "blob holds {}-byte scalars, run precision expects {}",
            width,
            F::BYTES
        )));
    }
    let blob = std::fs::read(bin_path).map_err(|e| Error::Data(format!("{}: {e}", bin_path.display())))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    let mut off = 0usize;
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let bytes = n * width;
        let end = off + bytes;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "import: blob ends inside {} (needs {bytes} bytes at offset {off}, file has {})",
                e.name,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[off..end].chunks(width) {
            data.push(F::from_le_slice(chunk));
        }
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        off = end;
    }
    if off != blob.len() {
        return Err(Error::Format(format!(
            "import: {} trailing bytes after the last manifest entry",
            blob.len() - off
        )));
    }
    Ok(out)
}

// ── modulation ──────────────────────────────────────────────────────

/// Pure grouped update: weight k gets `+ alpha * o[k / group]`. The
/// original buffer is untouched.
pub fn apply_modulation<F: Scalar>(
    frozen: &[F],
    o: &[F],
    alpha: F,
    group: usize,
) -> Result<Vec<F>> {
    if group == 0 {
        return Err(Error::Contract("group size must be positive".into()));
    }
    let expect = frozen.len().div_ceil(group);
    if o.len() != expect {
        return Err(Error::Contract(format!(
            "modulation vector has {} entries, ceil({}/{group}) = {expect} required",
            o.len(),
            frozen.len()
        )));
    }
    Ok(frozen
        .iter()
        .enumerate()
        .map(|(k, &w)| w + alpha * o[k / group])
        .collect())
}

// ── plan ────────────────────────────────────────────────────────────

/// Everything resolved before the fine-tune loop starts.
pub struct FinetunePlan<F> {
    pub spec: ParameterSpec,
    /// Imported tensors in spec order.
    pub frozen: Vec<Tensor<F>>,
    /// Indices of the selected (tuned) layers.
    pub selected: Vec<usize>,
    /// Concatenated selected weights.
    pub w_f: Vec<F>,
    /// Per-weight modulation scale over `w_f` (layer-resolved).
    pub alpha_per_weight: Vec<F>,
    pub group: usize,
    /// Modulation-vector length: ceil(|W_f| / group).
    pub o_len: usize,
    pub unit: PlanUnit<F>,
}

pub fn build_finetune_plan<F: Scalar>(cfg: &RunConfig) -> Result<FinetunePlan<F>> {
    let ft = cfg
        .finetune
        .as_ref()
        .ok_or_else(|| Error::Config("config has no finetune section".into()))?;
    let spec = build_spec(&cfg.arch)?;
    let imported = import_pretrained::<F>(Path::new(&ft.pretrained_bin), Path::new(&ft.manifest))?;
    if imported.len() != spec.layers().len() {
        return Err(Error::Format(format!(
            "import: {} arrays, architecture expects {}",
            imported.len(),
            spec.layers().len()
        )));
    }
    for ((name, t), l) in imported.iter().zip(spec.layers()) {
        if *name != l.name {
            return Err(Error::Format(format!(
                "import: first diverging entry: blob has {name:?}, architecture expects {:?}",
                l.name
            )));
        }
        if t.shape() != l.shape.as_slice() {
            return Err(Error::Format(format!(
                "import: {}: shape {:?} != expected {:?}",
                name,
                t.shape(),
                l.shape
            )));
        }
    }
    let frozen: Vec<Tensor<F>> = imported.into_iter().map(|(_, t)| t).collect();

    let mut selected = Vec::new();
    for sel in &ft.selector {
        match spec.find(sel) {
            Some(i) => selected.push(i),
            None => {
                return Err(Error::Config(format!(
                    "finetune selector names unknown layer {sel:?}"
                )))
            }
        }
    }
    selected.sort_unstable();
    selected.dedup();
    for name in ft.alphas.keys() {
        if spec.find(name).is_none() {
            return Err(Error::Config(format!(
                "finetune alpha table names unknown layer {name:?}"
            )));
        }
    }

    let mut w_f = Vec::new();
    let mut alpha_per_weight = Vec::new();
    for &i in &selected {
        let l = &spec.layers()[i];
        let a = F::from_f64(*ft.alphas.get(&l.name).unwrap_or(&ft.alpha));
        w_f.extend_from_slice(frozen[i].data());
        alpha_per_weight.extend(std::iter::repeat(a).take(l.size()));
    }
    if w_f.is_empty() {
        return Err(Error::Config("finetune selection is empty".into()));
    }
    let o_len = w_f.len().div_ceil(ft.group);

    let mut z_rng = SeedRng::substream(cfg.seeds.init, 103);
    let d = ft.d;
    if d * cfg.mapping.guard_ratio > o_len {
        return Err(Error::Config(format!(
            "finetune latent {d} violates d <= P/{} for P = {o_len} modulation elements",
            cfg.mapping.guard_ratio
        )));
    }
    let (scale_default, z_std_default) =
        crate::mapping::default_scales(o_len, d, cfg.mapping.alpha);
    let state = MappingState::new(
        o_len,
        d,
        cfg.seeds.init.wrapping_add(7777),
        F::from_f64(cfg.mapping.alpha),
        cfg.mapping.activation,
        F::from_f64(cfg.mapping.out_scale.unwrap_or(scale_default)),
        F::from_f64(cfg.mapping.z_init_std.unwrap_or(z_std_default)),
        &mut z_rng,
    )?;
    let unit = PlanUnit {
        name: "finetune".into(),
        state,
        layer_range: 0..0,
        offset: 0,
        size: o_len,
    };
    Ok(FinetunePlan {
        spec,
        frozen,
        selected,
        w_f,
        alpha_per_weight,
        group: ft.group,
        o_len,
        unit,
    })
}

impl<F: Scalar> FinetunePlan<F> {
    /// Checksums of the untouched (non-selected) layers.
    pub fn frozen_checksums(&self) -> Vec<(String, u64)> {
        self.spec
            .layers()
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.selected.contains(i))
            .map(|(i, l)| (l.name.clone(), checksum_scalars(self.frozen[i].data())))
            .collect()
    }

    fn uniform_alpha(&self) -> Option<F> {
        let first = *self.alpha_per_weight.first()?;
        self.alpha_per_weight
            .iter()
            .all(|a| a.to_le_bytes_vec() == first.to_le_bytes_vec())
            .then_some(first)
    }

    /// Assemble target params on a tape: tuned slices for selected layers,
    /// frozen constants elsewhere. Returns (params, o generation).
    pub fn params_graph(
        &self,
        tape: &mut Tape<F>,
        z: Var,
    ) -> Result<(Vec<Var>, crate::mapping::Generated)> {
        let gen = generate(tape, &self.unit.state, z)?;
        self.params_from_o(tape, gen.theta).map(|p| (p, gen))
    }

    /// Same assembly from an already generated modulation vector.
    pub fn params_from_o(&self, tape: &mut Tape<F>, o: Var) -> Result<Vec<Var>> {
        let frozen_flat = tape.constant(Tensor::from_vec(self.w_f.clone()));
        let scale = match self.uniform_alpha() {
            Some(a) => GroupScale::Uniform(a),
            None => GroupScale::PerElement(std::sync::Arc::new(self.alpha_per_weight.clone())),
        };
        let tuned = tape.group_mod_add(frozen_flat, o, self.group, scale)?;
        let mut params = Vec::with_capacity(self.spec.layers().len());
        let mut off = 0usize;
        for (i, l) in self.spec.layers().iter().enumerate() {
            if self.selected.contains(&i) {
                let s = tape.slice(tuned, off, l.size())?;
                params.push(tape.reshape(s, l.shape.clone())?);
                off += l.size();
            } else {
                params.push(tape.constant(self.frozen[i].clone()));
            }
        }
        Ok(params)
    }
}

// ── loop ────────────────────────────────────────────────────────────

pub struct FinetuneOutput<F> {
    pub plan: FinetunePlan<F>,
    pub records: Vec<MetricsRecord>,
    pub trainable_params: usize,
    pub final_train: Option<f64>,
    pub final_test: Option<f64>,
    /// Test metric of the untouched import, for the no-tuning arm.
    pub frozen_test: f64,
    pub checkpoint: PathBuf,
}

/// Evaluate arbitrary target params over a split (no randomness).
fn eval_params<F: Scalar>(
    cfg: &RunConfig,
    spec: &ParameterSpec,
    params: &[Tensor<F>],
    ds: &Dataset<F>,
    split: Split,
) -> Result<f64> {
    crate::train::evaluate_params(cfg, spec, params, ds, split)
}

pub fn finetune<F: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset<F>,
    out_dir: &Path,
) -> Result<FinetuneOutput<F>> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.resolved.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let mut plan = build_finetune_plan::<F>(cfg)?;
    let checks_before = plan.frozen_checksums();
    let frozen_test = eval_params(cfg, &plan.spec, &plan.frozen, ds, Split::Test)?;

    let mask = cfg.loss.mask();
    let mut coeffs = CoeffState::<F>::new(mask, 1, false);
    let trainable = plan.unit.state.d() + coeffs.scalar_count();

    let mut sizes = vec![plan.unit.state.d()];
    for s in [&coeffs.s_stab, &coeffs.s_smooth, &coeffs.s_align]
        .into_iter()
        .flatten()
    {
        sizes.push(s.len());
    }
    let mut opt = Optimizer::<F>::new(cfg.optimizer, &sizes);
    {
        let norm_scale =
            plan.unit.state.z_init_std.to_f64() * (plan.unit.state.d() as f64).sqrt();
        let mut mults = vec![norm_scale.min(1.0).max(1e-12)];
        mults.extend(std::iter::repeat(1.0).take(sizes.len() - 1));
        opt.set_lr_multipliers(mults);
    }
    let mut data_rng = SeedRng::substream(cfg.seeds.data_order, 0);
    let mut noise_rng = SeedRng::substream(cfg.seeds.noise, 0);

    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("metrics.jsonl"))?;
    let mut records = Vec::new();
    let started = std::time::Instant::now();
    let mut step = 0u64;
    let mut final_train = None;
    let mut final_test = None;

    for epoch in 0..cfg.epochs {
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut term_count = 0u64;
        for idx in batches(&ds.train, cfg.batch_size, &mut data_rng) {
            let batch = gather(&ds.train, &idx);
            let mut tape = Tape::<F>::new();
            let z = tape.leaf(plan.unit.state.z_tensor(), true);
            let (params, gen) = plan.params_graph(&mut tape, z)?;
            let x = tape.constant(batch.inputs.clone());
            let logits = forward_spec(&mut tape, &cfg.arch, &plan.spec, &params, x)?;
            let task = task_loss(&mut tape, logits, &batch.labels)?;

            let mut term_values = BTreeMap::new();
            term_values.insert("task".to_string(), tape.value(task).item().to_f64());
            let mut pairs = Vec::new();
            let mut registry = vec![z];

            if mask.stability {
                let d = plan.unit.state.d();
                let sigma = cfg.loss.sigma_noise.unwrap_or_else(|| {
                    let (_, z_std) = crate::mapping::default_scales(
                        plan.unit.state.p(),
                        d,
                        cfg.mapping.alpha,
                    );
                    0.1 * cfg.mapping.z_init_std.unwrap_or(z_std)
                });
                let mut eps = vec![0.0f64; d];
                noise_rng.fill_standard_normal(&mut eps);
                let eps: Vec<F> = eps
                    .iter()
                    .map(|&e| F::from_f64(e * sigma))
                    .collect();
                let pg = generate_perturbed(&mut tape, &plan.unit.state, &gen, &eps)?;
                let params_p = plan.params_from_o(&mut tape, pg.theta)?;
                let out_p = forward_spec(&mut tape, &cfg.arch, &plan.spec, &params_p, x)?;
                let diff = tape.sub(out_p, logits)?;
                let sq = tape.square(diff);
                let term = tape.mean(sq);
                term_values.insert("stability".into(), tape.value(term).item().to_f64());
                let s = tape.leaf(Tensor::from_vec(coeffs.s_stab.clone().unwrap()), true);
                registry.push(s);
                pairs.push((term, s));
            }
            if mask.smoothness {
                let term = match cfg.loss.smooth_mode {
                    SmoothMode::Hutchinson => smoothness_unit_hutchinson(
                        &mut tape,
                        &plan.unit,
                        &gen,
                        cfg.loss.probes,
                        &mut noise_rng,
                    )?,
                    SmoothMode::Exact => smoothness_unit_exact(&mut tape, &plan.unit, &gen)?,
                };
                term_values.insert("smoothness".into(), tape.value(term).item().to_f64());
                let s = tape.leaf(Tensor::from_vec(coeffs.s_smooth.clone().unwrap()), true);
                registry.push(s);
                pairs.push((term, s));
            }
            if mask.alignment {
                let (term, _) = alignment_unit_term(&mut tape, &plan.unit, &gen)?;
                term_values.insert("alignment".into(), tape.value(term).item().to_f64());
                let s = tape.leaf(Tensor::from_vec(coeffs.s_align.clone().unwrap()), true);
                registry.push(s);
                pairs.push((term, s));
            }
            let loss = total_loss(&mut tape, task, &pairs)?;
            term_values.insert("total".into(), tape.value(loss).item().to_f64());
            if term_values.values().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            for (k, v) in &term_values {
                *term_sums.entry(k.clone()).or_insert(0.0) += v;
            }
            term_count += 1;

            tape.backward(loss)?;
            let mut grads: Vec<Vec<F>> = registry
                .iter()
                .map(|&v| tape.grad(v).expect("leaf gradient").data().to_vec())
                .collect();
            drop(tape);
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut grads[..1], max_norm);
            }
            {
                let mut bufs: Vec<&mut [F]> = vec![plan.unit.state.z.as_mut_slice()];
                for s in [
                    coeffs.s_stab.as_mut(),
                    coeffs.s_smooth.as_mut(),
                    coeffs.s_align.as_mut(),
                ]
                .into_iter()
                .flatten()
                {
                    bufs.push(s.as_mut_slice());
                }
                opt.step(&mut bufs, &grads);
            }
            for sv in [
                coeffs.s_stab.as_mut(),
                coeffs.s_smooth.as_mut(),
                coeffs.s_align.as_mut(),
            ]
            .into_iter()
            .flatten()
            .flat_map(|v| v.iter_mut())
            {
                if *sv < F::ZERO {
                    *sv = F::ZERO;
                }
            }
            step += 1;
        }

        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let params = materialize_tuned(&plan)?;
            let train_m = eval_params(cfg, &plan.spec, &params, ds, Split::Train)?;
            let test_m = eval_params(cfg, &plan.spec, &params, ds, Split::Test)?;
            final_train = Some(train_m);
            final_test = Some(test_m);
            let record = MetricsRecord {
                step,
                epoch: epoch + 1,
                losses: term_sums
                    .iter()
                    .map(|(k, v)| (k.clone(), v / term_count.max(1) as f64))
                    .collect(),
                lambdas: coeffs
                    .lambdas()
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                train_metric: Some(train_m),
                test_metric: Some(test_m),
                trainable_params: trainable,
                wall_clock_s: started.elapsed().as_secs_f64(),
                peak_mem_mb: 0.0,
            };
            writeln!(metrics_file, "{}", serde_json::to_string(&record).unwrap())?;
            records.push(record);
            eprintln!(
                "finetune epoch {:>3}  train {:>8.4}  test {:>8.4}  (frozen arm {:>8.4})",
                epoch + 1,
                train_m,
                test_m,
                frozen_test
            );
        }
    }

    let checks_after = plan.frozen_checksums();
    if checks_before != checks_after {
        return Err(Error::Contract(
            "weights outside the tuned selection changed during fine-tuning".into(),
        ));
    }

    // persist the tuned latent alongside the run config
    let ck = out_dir.join("checkpoint.mnck");
    let data = crate::checkpoint::CheckpointData {
        config_json: serde_json::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?,
        latents: vec![plan.unit.state.z.clone()],
        coeffs: [
            coeffs.s_stab.clone(),
            coeffs.s_smooth.clone(),
            coeffs.s_align.clone(),
        ]
        .into_iter()
        .flatten()
        .collect(),
        extras: Vec::new(),
        opt_t: opt.t,
        opt_m: opt.m.clone(),
        opt_v: opt.v.clone(),
        step,
        epoch: cfg.epochs as u64,
        rng_states: vec![data_rng.capture(), noise_rng.capture()],
    };
    crate::checkpoint::save(&ck, &data)?;

    Ok(FinetuneOutput {
        plan,
        records,
        trainable_params: trainable,
        final_train,
        final_test,
        frozen_test,
        checkpoint: ck,
    })
}

/// Regenerate o from the current latent and materialize the tuned
/// parameter set as plain tensors.
pub fn materialize_tuned<F: Scalar>(plan: &FinetunePlan<F>) -> Result<Vec<Tensor<F>>> {
    let mut tape = Tape::<F>::new();
    let z = tape.leaf(plan.unit.state.z_tensor(), true);
    let (params, _) = plan.params_graph(&mut tape, z)?;
    Ok(params.iter().map(|&v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_modulation_zero_is_bit_exact() {
        let frozen = vec![0.5f32, -1.25, 3.0, 0.125];
        let o = vec![9.0f32, 9.0];
        let out = apply_modulation(&frozen, &o, 0.0, 2).unwrap();
        assert_eq!(out, frozen);
        let out2 = apply_modulation(&frozen, &[0.0, 0.0], 0.3, 2).unwrap();
        assert_eq!(out2, frozen);
    }

    #[test]
    fn ceiling_grouping_sizes() {
        // P = 10, L = 4 -> groups 4, 4, 2; o has length 3
        let frozen = vec![0.0f64; 10];
        assert!(apply_modulation(&frozen, &[1.0; 3], 1.0, 4).is_ok());
        assert!(matches!(
            apply_modulation(&frozen, &[1.0; 4], 1.0, 4),
            Err(Error::Contract(_))
        ));
        let out = apply_modulation(&frozen, &[1.0, 2.0, 3.0], 1.0, 4).unwrap();
        assert_eq!(out, vec![1., 1., 1., 1., 2., 2., 2., 2., 3., 3.]);
    }

    #[test]
    fn group_one_is_per_weight_delta() {
        let frozen = vec![1.0f64, 2.0, 3.0];
        let o = vec![0.5, -0.5, 0.25];
        let out = apply_modulation(&frozen, &o, 1.0, 1).unwrap();
        assert_eq!(out, vec![1.5, 1.5, 3.25]);
    }

    #[test]
    fn export_import_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("mapnet_ft_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let named = vec![
            (
                "fc1.weight".to_string(),
                Tensor::<f32>::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap(),
            ),
            ("fc1.bias".to_string(), Tensor::<f32>::from_vec(vec![1.5, -2.5])),
        ];
        let bin = dir.join("m.bin");
        let man = dir.join("m.json");
        export_pretrained(&named, &bin, &man).unwrap();
        let back = import_pretrained::<f32>(&bin, &man).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in named.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert!(t0.bit_eq(t1));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_selector_layer_is_named_in_error() {
        use crate::config::*;
        use crate::optim::OptimizerConfig;
        let dir = std::env::temp_dir().join(format!("mapnet_ft3_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let arch = crate::zoo::TargetArchitecture::Mlp {
            input: 4,
            hidden: vec![3],
            classes: 2,
        };
        let spec = crate::zoo::build_spec(&arch).unwrap();
        let named: Vec<(String, Tensor<f32>)> = spec
            .layers()
            .iter()
            .map(|l| (l.name.clone(), Tensor::zeros(l.shape.clone())))
            .collect();
        let bin = dir.join("p.bin");
        let man = dir.join("p.json");
        export_pretrained(&named, &bin, &man).unwrap();
        let cfg = RunConfig {
            mode: RunMode::Slvt,
            variant: ModeVariant::Standard,
            arch,
            mapping: MappingConfig { d: 1, guard_ratio: 1, ..MappingConfig::default() },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::Adam {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            epochs: 1,
            batch_size: 4,
            seeds: Seeds::default(),
            precision: crate::scalar::Precision::F32,
            clip_norm: None,
            lr_schedule: Default::default(),
            dataset: DatasetConfig::Synth {
                recipe: SynthRecipe::GaussianBlobs {
                    classes: 2,
                    dim: 4,
                    per_class_train: 4,
                    per_class_test: 2,
                    separation: 5.0,
                },
                seed: 1,
            },
            eval_every: 1,
            eval_train: true,
            probe: None,
            finetune: Some(FinetuneConfig {
                pretrained_bin: bin.to_string_lossy().into_owned(),
                manifest: man.to_string_lossy().into_owned(),
                selector: vec!["fc9.weight".into()],
                group: 2,
                d: 1,
                alpha: 0.1,
                alphas: Default::default(),
            }),
            ablation: None,
        };
        let err = match build_finetune_plan::<f32>(&cfg) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("unknown selector must fail"),
        };
        assert!(err.contains("fc9.weight"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_blob_names_diverging_entry() {
        let dir = std::env::temp_dir().join(format!("mapnet_ft2_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let named = vec![
            ("a.weight".to_string(), Tensor::<f32>::from_vec(vec![1.0; 4])),
            ("b.weight".to_string(), Tensor::<f32>::from_vec(vec![2.0; 4])),
        ];
        let bin = dir.join("m.bin");
        let man = dir.join("m.json");
        export_pretrained(&named, &bin, &man).unwrap();
        let blob = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &blob[..blob.len() - 6]).unwrap();
        let err = import_pretrained::<f32>(&bin, &man).unwrap_err().to_string();
        assert!(err.contains("b.weight"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
