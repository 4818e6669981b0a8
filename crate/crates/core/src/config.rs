//! Run configuration: JSON schema, dotted-key overrides, validation.
//!
//! Validation collects every range violation at once (each issue carries
//! its dotted key path) instead of stopping at the first, and the resolved
//! config — with every default materialized — is what gets written next to
//! a run's outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossMask, SmoothMode};
use crate::mapping::Activation;
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::scalar::Precision;
use crate::zoo::{build_spec, TargetArchitecture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Baseline,
    Slvt,
    Lwt,
    Ablation,
}

/// Generator arrangement variants used by robustness ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeVariant {
    /// Trainable latent, fixed matrix, latent modulation.
    #[default]
    Standard,
    /// A separate trainable vector modulates the matrix instead of z.
    LvWmap,
    /// The matrix itself is trained by gradient descent; z is fixed.
    FullDnn,
    /// Both the latent and the matrix are trained.
    LvFullDnn,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_guard_ratio() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MappingConfig {
    /// Latent dimension for single-unit runs; total latent budget for
    /// layer-wise runs.
    pub d: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Defaults to 1/sqrt(d) when absent.
    #[serde(default)]
    pub out_scale: Option<f64>,
    /// Defaults to 1/sqrt(d) when absent.
    #[serde(default)]
    pub z_init_std: Option<f64>,
    #[serde(default = "default_guard_ratio")]
    pub guard_ratio: usize,
    /// Low-rank factorization ranks per fully connected layer prefix.
    #[serde(default)]
    pub lrd: BTreeMap<String, usize>,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            d: 1024,
            alpha: default_alpha(),
            activation: default_activation(),
            out_scale: None,
            z_init_std: None,
            guard_ratio: default_guard_ratio(),
            lrd: BTreeMap::new(),
        }
    }
}


fn default_probes() -> usize {
    1
}
fn default_smooth_mode() -> SmoothMode {
    SmoothMode::Hutchinson
}
fn default_mask_on() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    #[serde(default = "default_mask_on")]
    pub stability: bool,
    #[serde(default = "default_mask_on")]
    pub smoothness: bool,
    #[serde(default = "default_mask_on")]
    pub alignment: bool,
    /// Stability perturbation std. Defaults to 10% of the resolved latent
    /// init scale, which keeps the perturbation small relative to z.
    #[serde(default)]
    pub sigma_noise: Option<f64>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_smooth_mode")]
    pub smooth_mode: SmoothMode,
    #[serde(default)]
    pub per_unit_coeffs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            stability: true,
            smoothness: true,
            alignment: true,
            sigma_noise: None,
            probes: default_probes(),
            smooth_mode: default_smooth_mode(),
            per_unit_coeffs: false,
        }
    }
}

impl LossConfig {
    pub fn mask(&self) -> LossMask {
        LossMask {
            stability: self.stability,
            smoothness: self.smoothness,
            alignment: self.alignment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data_order: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            data_order: 2,
            noise: 3,
        }
    }
}

fn default_split() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Big-endian IDX image/label files (MNIST family).
    Idx {
        dir: String,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Numeric CSV with a header row, windowed into a forecasting task.
    Csv {
        path: String,
        features: Vec<String>,
        target: String,
        window: usize,
        horizon: usize,
        #[serde(default = "default_split")]
        split: f64,
    },
    /// Deterministic synthetic fixtures.
    Synth { recipe: SynthRecipe, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SynthRecipe {
    GaussianBlobs {
        classes: usize,
        dim: usize,
        per_class_train: usize,
        per_class_test: usize,
        separation: f64,
    },
    SineMix {
        points: usize,
        freqs: Vec<f64>,
        noise: f64,
        window: usize,
        horizon: usize,
        #[serde(default = "default_split")]
        split: f64,
    },
    XorGrid {
        /// Points per checkerboard cell (6 x 6 board, alternating labels).
        per_cell: usize,
        noise: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeConfig {
    /// Record a snapshot every k steps.
    pub every_k: usize,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_cap_mb")]
    pub cap_mb: usize,
}

fn default_components() -> usize {
    2
}
fn default_cap_mb() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinetuneConfig {
    /// Raw little-endian blob with the pretrained arrays.
    pub pretrained_bin: String,
    /// JSON manifest naming the arrays in order with shapes.
    pub manifest: String,
    /// Layer names to tune; everything else stays frozen.
    pub selector: Vec<String>,
    /// Weights modulated per generated element.
    pub group: usize,
    /// Latent dimension of the modulation generator.
    pub d: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Optional per-layer modulation scales (layer name -> alpha).
    #[serde(default)]
    pub alphas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub stability: Option<bool>,
    #[serde(default)]
    pub smoothness: Option<bool>,
    #[serde(default)]
    pub alignment: Option<bool>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub variant: Option<ModeVariant>,
    #[serde(default)]
    pub mode: Option<RunMode>,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub lrd: Option<BTreeMap<String, usize>>,
    /// Magnitude-prune this fraction of inference parameters at eval time.
    #[serde(default)]
    pub prune: Option<f64>,
}

fn default_eval_every() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_clip_norm() -> Option<f64> {
    Some(5.0)
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    #[serde(default)]
    pub variant: ModeVariant,
    pub arch: TargetArchitecture,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
    /// Learning-rate schedule over the configured epochs.
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub dataset: DatasetConfig,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Also evaluate the train split at each evaluation point (the final
    /// epoch always evaluates both).
    #[serde(default = "default_true")]
    pub eval_train: bool,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default)]
    pub ablation: Option<Vec<AblationCell>>,
}

/// One validation failure, addressed by dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Apply `--set key=value` overrides onto the raw JSON tree. Values parse
/// as JSON when possible and fall back to strings.
pub fn apply_overrides(value: &mut serde_json::Value, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let mut cursor = &mut *value;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                match cursor {
                    serde_json::Value::Object(map) => {
                        map.insert(part.to_string(), parsed.clone());
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "override {key}: {} is not an object",
                            parts[..i].join(".")
                        )))
                    }
                }
            } else {
                match cursor {
                    serde_json::Value::Object(map) => {
                        cursor = map
                            .entry(part.to_string())
                            .or_insert_with(|| serde_json::Value::Object(Default::default()));
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "override {key}: {} is not an object",
                            parts[..i].join(".")
                        )))
                    }
                }
            }
        }
    }
    Ok(())
}

/// Parse, apply overrides, type-check, and range-check a config. All
/// range violations are reported together.
pub fn validate_config(
    json_text: &str,
    overrides: &[(String, String)],
) -> std::result::Result<RunConfig, Vec<ConfigIssue>> {
    let mut value: serde_json::Value = serde_json::from_str(json_text).map_err(|e| {
        vec![ConfigIssue {
            path: "<root>".into(),
            message: format!("invalid JSON: {e}"),
        }]
    })?;
    apply_overrides(&mut value, overrides).map_err(|e| {
        vec![ConfigIssue {
            path: "<override>".into(),
            message: e.to_string(),
        }]
    })?;
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
        vec![ConfigIssue {
            path: "<schema>".into(),
            message: e.to_string(),
        }]
    })?;
    let issues = validate(&cfg);
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(issues)
    }
}

/// Range and consistency checks over a typed config.
pub fn validate(cfg: &RunConfig) -> Vec<ConfigIssue> {
    let mut issues = Vec::new();
    let mut push = |path: &str, msg: String| {
        issues.push(ConfigIssue {
            path: path.to_string(),
            message: msg,
        })
    };

    if cfg.epochs == 0 {
        push("epochs", "must be at least 1".into());
    }
    if cfg.batch_size == 0 {
        push("batch_size", "must be at least 1".into());
    }
    if cfg.eval_every == 0 {
        push("eval_every", "must be at least 1".into());
    }
    if let Some(c) = cfg.clip_norm {
        if !(c > 0.0) {
            push("clip_norm", format!("must be positive, got {c}"));
        }
    }
    if cfg.optimizer.lr() <= 0.0 {
        push("optimizer.lr", format!("must be positive, got {}", cfg.optimizer.lr()));
    }
    if let OptimizerConfig::Adam { beta1, beta2, .. } = cfg.optimizer {
        if !(0.0..1.0).contains(&beta1) {
            push("optimizer.beta1", format!("must be in [0, 1), got {beta1}"));
        }
        if !(0.0..1.0).contains(&beta2) {
            push("optimizer.beta2", format!("must be in [0, 1), got {beta2}"));
        }
    }

    if cfg.mapping.alpha < 0.0 {
        push("mapping.alpha", format!("must be nonnegative, got {}", cfg.mapping.alpha));
    }
    if cfg.mapping.d == 0 {
        push("mapping.d", "must be at least 1".into());
    }
    if cfg.mapping.guard_ratio == 0 {
        push("mapping.guard_ratio", "must be at least 1".into());
    }
    if let Some(s) = cfg.mapping.out_scale {
        if s <= 0.0 {
            push("mapping.out_scale", format!("must be positive, got {s}"));
        }
    }
    if let Some(s) = cfg.mapping.z_init_std {
        if s < 0.0 {
            push("mapping.z_init_std", format!("must be nonnegative, got {s}"));
        }
    }

    if let Some(s) = cfg.loss.sigma_noise {
        if s < 0.0 {
            push("loss.sigma_noise", format!("must be nonnegative, got {s}"));
        }
    }
    if cfg.loss.probes == 0 {
        push("loss.probes", "must be at least 1".into());
    }

    match build_spec(&cfg.arch) {
        Err(e) => push("arch", e.to_string()),
        Ok(spec) => {
            let spec = match spec.with_lrd(&cfg.mapping.lrd) {
                Err(e) => {
                    push("mapping.lrd", e.to_string());
                    spec
                }
                Ok(s) => s,
            };
            let p = spec.flat_size();
            if cfg.mode == RunMode::Slvt
                && cfg.mapping.d != 0
                && cfg.mapping.guard_ratio != 0
                && cfg.mapping.d * cfg.mapping.guard_ratio > p
            {
                push(
                    "mapping.d",
                    format!(
                        "latent dimension {} violates the d << P guard (d <= P/{} with P = {p})",
                        cfg.mapping.d, cfg.mapping.guard_ratio
                    ),
                );
            }
            if matches!(cfg.variant, ModeVariant::FullDnn | ModeVariant::LvFullDnn) {
                let elems = p.saturating_mul(cfg.mapping.d);
                if elems > 20_000_000 {
                    push(
                        "variant",
                        format!(
                            "dense-matrix variants materialize P*d = {elems} trainable entries; limit is 20M"
                        ),
                    );
                }
                if cfg.loss.smoothness {
                    push(
                        "loss.smoothness",
                        "not supported for dense-matrix variants; disable it".into(),
                    );
                }
            }
        }
    }

    if cfg.mode == RunMode::Baseline {
        if cfg.loss.stability || cfg.loss.smoothness || cfg.loss.alignment {
            push(
                "loss",
                "baseline mode trains the target directly; regularizers need a generator (set stability/smoothness/alignment to false)"
                    .into(),
            );
        }
        if cfg.variant != ModeVariant::Standard {
            push("variant", "variants require a mapped mode".into());
        }
    }
    if let Some(p) = &cfg.probe {
        if cfg.mode != RunMode::Baseline {
            push("probe", "parameter snapshots require baseline mode".into());
        }
        if p.every_k == 0 {
            push("probe.every_k", "must be at least 1".into());
        }
        if p.components == 0 {
            push("probe.components", "must be at least 1".into());
        }
    }
    if cfg.mode == RunMode::Ablation && cfg.ablation.as_deref().map_or(true, |c| c.is_empty()) {
        push("ablation", "ablation mode needs at least one cell".into());
    }

    let regression_arch = matches!(cfg.arch, TargetArchitecture::Lstm { .. });
    let regression_data = matches!(
        cfg.dataset,
        DatasetConfig::Csv { .. }
            | DatasetConfig::Synth {
                recipe: SynthRecipe::SineMix { .. },
                ..
            }
    );
    if regression_arch != regression_data {
        push(
            "dataset",
            "sequence architectures pair with series datasets and classifiers with labeled datasets"
                .into(),
        );
    }
    if let DatasetConfig::Csv { window, horizon, split, .. } = &cfg.dataset {
        if *window == 0 {
            push("dataset.window", "must be at least 1".into());
        }
        if *horizon == 0 {
            push("dataset.horizon", "must be at least 1".into());
        }
        if !(0.0 < *split && *split < 1.0) {
            push("dataset.split", format!("must be in (0, 1), got {split}"));
        }
    }
    if let Some(ft) = &cfg.finetune {
        if ft.group == 0 {
            push("finetune.group", "must be at least 1".into());
        }
        if ft.d == 0 {
            push("finetune.d", "must be at least 1".into());
        }
        if ft.selector.is_empty() {
            push("finetune.selector", "select at least one layer".into());
        }
        if ft.alpha < 0.0 {
            push("finetune.alpha", format!("must be nonnegative, got {}", ft.alpha));
        }
    }

    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        serde_json::json!({
            "mode": "slvt",
            "arch": {"kind": "mlp", "input": 64, "hidden": [32], "classes": 4},
            "mapping": {"d": 16},
            "optimizer": {"kind": "adam", "lr": 1e-3},
            "epochs": 1,
            "batch_size": 8,
            "dataset": {"kind": "synth", "seed": 5, "recipe": {"name": "gaussian_blobs",
                "classes": 4, "dim": 64, "per_class_train": 10, "per_class_test": 5, "separation": 6.0}}
        })
        .to_string()
    }

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let cfg = validate_config(&minimal_json(), &[]).unwrap();
        assert_eq!(cfg.mapping.alpha, 0.1);
        assert_eq!(cfg.mapping.guard_ratio, 10);
        assert!(cfg.loss.stability && cfg.loss.smoothness && cfg.loss.alignment);
        assert_eq!(cfg.clip_norm, Some(5.0));
        assert_eq!(cfg.precision, Precision::F32);
        // resolved round-trip keeps every field explicit
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert!(text.contains("sigma_noise"));
        assert!(text.contains("guard_ratio"));
    }

    #[test]
    fn override_sets_nested_key() {
        let cfg = validate_config(
            &minimal_json(),
            &[("mapping.d".into(), "32".into())],
        )
        .unwrap();
        assert_eq!(cfg.mapping.d, 32);
    }

    #[test]
    fn guard_violation_is_reported_with_path() {
        // P = 64*32+32+32*4+4 = 2212; d = 512 -> d*10 > P
        let errs = validate_config(
            &minimal_json(),
            &[("mapping.d".into(), "512".into())],
        )
        .unwrap_err();
        assert!(errs.iter().any(|i| i.path == "mapping.d" && i.message.contains("d << P")));
    }

    #[test]
    fn multiple_violations_reported_at_once() {
        let errs = validate_config(
            &minimal_json(),
            &[
                ("mapping.alpha".into(), "-0.5".into()),
                ("batch_size".into(), "0".into()),
                ("loss.sigma_noise".into(), "-1".into()),
            ],
        )
        .unwrap_err();
        assert!(errs.len() >= 3, "{errs:?}");
        assert!(errs.iter().any(|i| i.path == "mapping.alpha"));
        assert!(errs.iter().any(|i| i.path == "batch_size"));
        assert!(errs.iter().any(|i| i.path == "loss.sigma_noise"));
    }

    #[test]
    fn baseline_with_regularizers_rejected() {
        let errs = validate_config(
            &minimal_json(),
            &[("mode".into(), "\"baseline\"".into())],
        )
        .unwrap_err();
        assert!(errs.iter().any(|i| i.path == "loss"));
    }
}
