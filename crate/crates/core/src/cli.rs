//! Command-line front end: config-driven runs, sweeps, probes, and report
//! merging.
//!
//! Exit codes: 0 success, 1 configuration/usage problems, 2 data/format
//! problems, 3 numerical aborts. Structured logs go to stderr; artifacts
//! go to the chosen output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{validate_config, RunConfig, RunMode};
use crate::data::load;
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::train::{self, MetricsRecord};

#[derive(Parser, Debug)]
#[command(name = "mapnet", version, about = "latent-vector training of neural networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts
    #[arg(long)]
    out: PathBuf,
    /// Dotted-key config overrides, e.g. --set mapping.d=1024 (repeatable)
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// Base seed: sets seeds.init, data_order = seed+1, noise = seed+2
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to MAPNET_THREADS, then all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Compute precision override
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train one run (baseline, slvt, or lwt mode)
    Train(CommonOpts),
    /// Evaluate a checkpoint on its configured dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional file to write the metrics JSON into
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Fine-tune frozen pretrained weights via modulation vectors
    Finetune(CommonOpts),
    /// Run an ablation grid (mode = "ablation" with cells)
    Ablate(CommonOpts),
    /// Baseline run with parameter snapshots and per-layer PCA reports
    Probe(CommonOpts),
    /// Merge run directories into one comparison CSV
    Report {
        /// Run output directories
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Path of the merged CSV
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

fn init_threads(cli_threads: Option<usize>) {
    let n = cli_threads.or_else(|| {
        std::env::var("MAPNET_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(opts: &CommonOpts) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&opts.config)
        .map_err(|e| Error::Config(format!("{}: {e}", opts.config.display())))?;
    let mut overrides = opts.set.clone();
    if let Some(seed) = opts.seed {
        overrides.push(("seeds.init".into(), seed.to_string()));
        overrides.push(("seeds.data_order".into(), (seed + 1).to_string()));
        overrides.push(("seeds.noise".into(), (seed + 2).to_string()));
    }
    if let Some(p) = &opts.precision {
        overrides.push(("precision".into(), format!("\"{p}\"")));
    }
    match validate_config(&text, &overrides) {
        Ok(cfg) => {
            eprintln!(
                "resolved config:\n{}",
                serde_json::to_string_pretty(&cfg).unwrap()
            );
            Ok(cfg)
        }
        Err(issues) => {
            for i in &issues {
                eprintln!("config error: {i}");
            }
            Err(Error::Config(format!("{} issue(s) in {}", issues.len(), opts.config.display())))
        }
    }
}

fn run_train<F: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load::<F>(&cfg.dataset)?;
    if cfg.mode == RunMode::Ablation {
        return Err(Error::Config(
            "mode is \"ablation\"; use the ablate command".into(),
        ));
    }
    let result = train::train(cfg, &ds, out)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": result.checkpoint,
            "trainable_params": result.trainable_params,
            "train_metric": result.final_train,
            "test_metric": result.final_test,
        })
    );
    Ok(())
}

fn run_ablate<F: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.mode != RunMode::Ablation {
        return Err(Error::Config("ablate needs mode = \"ablation\"".into()));
    }
    let ds = load::<F>(&cfg.dataset)?;
    let rows = train::ablation_sweep(cfg, &ds, out)?;
    println!("{}", serde_json::to_string_pretty(&rows).unwrap());
    eprintln!("sweep table: {}", out.join("sweep.csv").display());
    Ok(())
}

fn run_probe<F: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.probe.is_none() {
        return Err(Error::Config("probe command needs a probe section".into()));
    }
    if cfg.mode != RunMode::Baseline {
        return Err(Error::Config("probe runs in baseline mode".into()));
    }
    run_train::<F>(cfg, out)?;
    eprintln!("pca reports: {}", out.join("probe").display());
    Ok(())
}

fn run_finetune<F: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load::<F>(&cfg.dataset)?;
    let result = crate::finetune::finetune(cfg, &ds, out)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": result.checkpoint,
            "trainable_params": result.trainable_params,
            "train_metric": result.final_train,
            "test_metric": result.final_test,
            "frozen_test_metric": result.frozen_test,
        })
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = train::peek_config(checkpoint)?;
    let metrics = match cfg.precision {
        Precision::F32 => eval_with::<f32>(checkpoint, &cfg)?,
        Precision::F64 => eval_with::<f64>(checkpoint, &cfg)?,
    };
    let text = serde_json::to_string_pretty(&metrics).unwrap();
    if let Some(p) = out {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn eval_with<F: Scalar>(checkpoint: &Path, cfg: &RunConfig) -> Result<serde_json::Value> {
    let (_, state, spec) = train::load_state::<F>(checkpoint)?;
    let ds = load::<F>(&cfg.dataset)?;
    let train_m = train::evaluate(cfg, &spec, &state, &ds, crate::data::Split::Train)?;
    let test_m = train::evaluate(cfg, &spec, &state, &ds, crate::data::Split::Test)?;
    Ok(serde_json::json!({
        "step": state.step,
        "epoch": state.epoch,
        "trainable_params": train::trainable_count(&state, cfg),
        "train_metric": train_m,
        "test_metric": test_m,
    }))
}

/// One merged comparison table: a row per run, a metric column per
/// dataset seen across the runs.
fn run_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    struct Row {
        name: String,
        mode: String,
        params: usize,
        dataset: String,
        test: Option<f64>,
    }
    let mut rows = Vec::new();
    for dir in runs {
        let cfg_text = std::fs::read_to_string(dir.join("config.resolved.json"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        let cfg: RunConfig = serde_json::from_str(&cfg_text)
            .map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        let metrics_text = std::fs::read_to_string(dir.join("metrics.jsonl"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        let last: Option<MetricsRecord> = metrics_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .last()
            .map(|l| serde_json::from_str(l))
            .transpose()
            .map_err(|e| Error::Format(format!("{}: metrics: {e}", dir.display())))?;
        let dataset = match &cfg.dataset {
            crate::config::DatasetConfig::Idx { dir, .. } => Path::new(dir)
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into()),
            crate::config::DatasetConfig::Csv { path, .. } => Path::new(path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
            crate::config::DatasetConfig::Synth { recipe, .. } => match recipe {
                crate::config::SynthRecipe::GaussianBlobs { .. } => "gaussian_blobs".into(),
                crate::config::SynthRecipe::SineMix { .. } => "sine_mix".into(),
                crate::config::SynthRecipe::XorGrid { .. } => "xor_grid".into(),
            },
        };
        rows.push(Row {
            name: dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
            mode: format!("{:?}", cfg.mode).to_lowercase(),
            params: last.as_ref().map_or(0, |r| r.trainable_params),
            dataset,
            test: last.as_ref().and_then(|r| r.test_metric),
        });
    }
    let mut datasets: Vec<String> = rows.iter().map(|r| r.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();

    let mut csv = String::from("method,mode,params");
    for d in &datasets {
        csv.push_str(&format!(",{d}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{},{}", r.name, r.mode, r.params));
        for d in &datasets {
            if *d == r.dataset {
                match r.test {
                    Some(v) => csv.push_str(&format!(",{v}")),
                    None => csv.push(','),
                }
            } else {
                csv.push(',');
            }
        }
        csv.push('\n');
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, csv)?;
    eprintln!("report: {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(opts) => {
            init_threads(opts.threads);
            let cfg = load_config(&opts)?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg, &opts.out),
                Precision::F64 => run_train::<f64>(&cfg, &opts.out),
            }
        }
        Cmd::Ablate(opts) => {
            init_threads(opts.threads);
            let cfg = load_config(&opts)?;
            match cfg.precision {
                Precision::F32 => run_ablate::<f32>(&cfg, &opts.out),
                Precision::F64 => run_ablate::<f64>(&cfg, &opts.out),
            }
        }
        Cmd::Probe(opts) => {
            init_threads(opts.threads);
            let cfg = load_config(&opts)?;
            match cfg.precision {
                Precision::F32 => run_probe::<f32>(&cfg, &opts.out),
                Precision::F64 => run_probe::<f64>(&cfg, &opts.out),
            }
        }
        Cmd::Finetune(opts) => {
            init_threads(opts.threads);
            let cfg = load_config(&opts)?;
            if cfg.finetune.is_none() {
                return Err(Error::Config("finetune needs a finetune section".into()));
            }
            match cfg.precision {
                Precision::F32 => run_finetune::<f32>(&cfg, &opts.out),
                Precision::F64 => run_finetune::<f64>(&cfg, &opts.out),
            }
        }
        Cmd::Eval {
            checkpoint,
            out,
            threads,
        } => {
            init_threads(threads);
            run_eval(&checkpoint, out.as_deref())
        }
        Cmd::Report { runs, out } => run_report(&runs, &out),
    }
}

/// Entry point used by the `mapnet` binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            if e.use_stderr() {
                eprintln!("{e}");
                return 1;
            }
            print!("{e}");
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
