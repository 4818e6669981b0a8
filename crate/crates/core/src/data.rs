//! Dataset ingestion and batching: IDX image files, numeric CSV series,
//! and seeded synthetic fixtures. Loading is pure given file bytes; no
//! network access happens here.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::config::{DatasetConfig, SynthRecipe};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Targets are class labels or regression values.
#[derive(Debug, Clone)]
pub enum Targets<F> {
    Labels(Vec<usize>),
    Values { data: Vec<F>, dim: usize },
}

impl<F: Scalar> Targets<F> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values { data, dim } => data.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SplitData<F> {
    /// Flat row-major inputs, one row per sample.
    pub inputs: Vec<F>,
    /// Per-sample input width.
    pub width: usize,
    pub targets: Targets<F>,
}

impl<F: Scalar> SplitData<F> {
    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.inputs.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub task: TaskKind,
    /// Class count for classification tasks.
    pub classes: usize,
    pub train: SplitData<F>,
    pub test: SplitData<F>,
    /// Human-readable source tag for reports.
    pub name: String,
}

impl<F: Scalar> Dataset<F> {
    pub fn split(&self, s: Split) -> &SplitData<F> {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

// ── IDX ─────────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803; // unsigned byte, rank 3
const IDX_LABELS_MAGIC: u32 = 0x0000_0801; // unsigned byte, rank 1

fn read_u32_be(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

#[derive(Debug)]
struct IdxImages {
    count: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}, observed 0x{magic:08x}",
            path.display()
        )));
    }
    let count = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let expect = 16 + count * rows * cols;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header implies {expect}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected label magic 0x{IDX_LABELS_MAGIC:08x}, observed 0x{magic:08x}",
            path.display()
        )));
    }
    let count = read_u32_be(bytes, 4, "labels")? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            8 + count
        )));
    }
    Ok(bytes[8..].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Load one (images, labels) IDX pair into a split. Pixels scale to
/// [0, 1]; counts are cross-checked between the two files.
pub fn load_idx_split<F: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<(SplitData<F>, usize)> {
    let images = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if images.count != labels.len() {
        return Err(Error::Data(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            images.count,
            labels_path.display(),
            labels.len()
        )));
    }
    let keep = limit.map_or(images.count, |l| l.min(images.count));
    let width = images.rows * images.cols;
    let scale = F::from_f64(1.0 / 255.0);
    let inputs: Vec<F> = images.pixels[..keep * width]
        .iter()
        .map(|&b| F::from_f64(b as f64) * scale)
        .collect();
    let labels: Vec<usize> = labels[..keep].iter().map(|&b| b as usize).collect();
    let max_label = labels.iter().copied().max().unwrap_or(0);
    Ok((
        SplitData {
            inputs,
            width,
            targets: Targets::Labels(labels),
        },
        max_label + 1,
    ))
}

/// Standard four-file layout under one directory.
pub fn load_idx_dir<F: Scalar>(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<Dataset<F>> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let (train, c1) = load_idx_split(
        &p("train-images-idx3-ubyte"),
        &p("train-labels-idx1-ubyte"),
        train_limit,
    )?;
    let (test, c2) = load_idx_split(
        &p("t10k-images-idx3-ubyte"),
        &p("t10k-labels-idx1-ubyte"),
        test_limit,
    )?;
    Ok(Dataset {
        task: TaskKind::Classification,
        classes: c1.max(c2),
        train,
        test,
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
    })
}

/// Expected file names for user-supplied IDX data.
pub fn idx_expected_files() -> [&'static str; 4] {
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
}

// ── CSV series ──────────────────────────────────────────────────────

/// Sliding-window forecasting dataset from a numeric CSV.
///
/// Window `w`, horizon `h`: sample i covers rows [i, i+w) and its target
/// is the value h steps past the window end; eligible starts run over
/// [0, len - w - h). The split is chronological, and min-max normalization
/// is fit on the train rows only (a constant column maps to all zeros).
pub fn load_csv_series<F: Scalar>(
    path: &Path,
    features: &[String],
    target: &str,
    window: usize,
    horizon: usize,
    split: f64,
) -> Result<Dataset<F>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col_idx = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Data(format!("column {name} not in header {cols:?}")))
    };
    let feat_idx: Vec<usize> = features
        .iter()
        .map(|f| col_idx(f))
        .collect::<Result<_>>()?;
    let target_idx = col_idx(target)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let mut row = Vec::with_capacity(feat_idx.len() + 1);
        for &ci in feat_idx.iter().chain(std::iter::once(&target_idx)) {
            let cell = cells.get(ci).copied().unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {} column {} ({}): not numeric: {cell:?}",
                    lineno + 1,
                    ci + 1,
                    cols.get(ci).copied().unwrap_or("?")
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    series_windows(&rows, feat_idx.len(), window, horizon, split, "csv")
}

/// Shared windowing for CSV and synthetic series. `rows` carries the
/// feature columns followed by the target column.
fn series_windows<F: Scalar>(
    rows: &[Vec<f64>],
    n_features: usize,
    window: usize,
    horizon: usize,
    split: f64,
    name: &str,
) -> Result<Dataset<F>> {
    let len = rows.len();
    if window == 0 || horizon == 0 {
        return Err(Error::Config("window and horizon must be at least 1".into()));
    }
    if len < window + horizon + 1 {
        return Err(Error::Data(format!(
            "series of length {len} too short for window {window} + horizon {horizon}"
        )));
    }
    let n_samples = len - window - horizon;
    let n_train = ((n_samples as f64) * split).floor().max(1.0) as usize;
    let n_train = n_train.min(n_samples - 1);

    // min-max fit on train rows only: the rows any train window can touch
    let train_row_end = (n_train - 1) + window + horizon;
    let n_cols = n_features + 1;
    let mut lo = vec![f64::INFINITY; n_cols];
    let mut hi = vec![f64::NEG_INFINITY; n_cols];
    for row in &rows[..=train_row_end] {
        for (c, &v) in row.iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let norm = |c: usize, v: f64| -> f64 {
        let span = hi[c] - lo[c];
        if span == 0.0 {
            0.0
        } else {
            (v - lo[c]) / span
        }
    };

    let build = |range: std::ops::Range<usize>| -> SplitData<F> {
        let mut inputs = Vec::with_capacity(range.len() * window * n_features);
        let mut targets = Vec::with_capacity(range.len());
        for i in range {
            for t in 0..window {
                for c in 0..n_features {
                    inputs.push(F::from_f64(norm(c, rows[i + t][c])));
                }
            }
            let tgt_row = i + window + horizon - 1;
            targets.push(F::from_f64(norm(n_features, rows[tgt_row][n_features])));
        }
        SplitData {
            inputs,
            width: window * n_features,
            targets: Targets::Values {
                data: targets,
                dim: 1,
            },
        }
    };

    Ok(Dataset {
        task: TaskKind::Regression,
        classes: 0,
        train: build(0..n_train),
        test: build(n_train..n_samples),
        name: name.into(),
    })
}

// ── synthetic fixtures ──────────────────────────────────────────────

/// Deterministic synthetic datasets for tests and hermetic runs.
pub fn synth<F: Scalar>(recipe: &SynthRecipe, seed: u64) -> Result<Dataset<F>> {
    match recipe {
        SynthRecipe::GaussianBlobs {
            classes,
            dim,
            per_class_train,
            per_class_test,
            separation,
        } => gaussian_blobs(*classes, *dim, *per_class_train, *per_class_test, *separation, seed),
        SynthRecipe::SineMix {
            points,
            freqs,
            noise,
            window,
            horizon,
            split,
        } => {
            let series = sine_series(*points, freqs, *noise, seed);
            let rows: Vec<Vec<f64>> = series.iter().map(|&v| vec![v, v]).collect();
            series_windows(&rows, 1, *window, *horizon, *split, "sine_mix")
        }
        SynthRecipe::XorGrid { per_cell, noise } => xor_grid(*per_cell, *noise, seed),
    }
}

/// Raw mixed-sine series, exposed so its variance can serve as a
/// reference scale in evaluations.
pub fn sine_series(points: usize, freqs: &[f64], noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = SeedRng::substream(seed, 10);
    (0..points)
        .map(|t| {
            let x = t as f64;
            let mut v = 0.0;
            for (k, &f) in freqs.iter().enumerate() {
                v += (1.0 / (k + 1) as f64) * (2.0 * std::f64::consts::PI * f * x).sin();
            }
            v + noise * rng.standard_normal()
        })
        .collect()
}

fn gaussian_blobs<F: Scalar>(
    classes: usize,
    dim: usize,
    per_train: usize,
    per_test: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if classes == 0 || dim == 0 || per_train == 0 || per_test == 0 {
        return Err(Error::Config("blob parameters must be positive".into()));
    }
    let mut rng = SeedRng::substream(seed, 11);
    // seeded random unit directions as class centers
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut c = vec![0.0; dim];
            rng.fill_standard_normal(&mut c);
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            c.iter().map(|v| v / n * separation).collect()
        })
        .collect();
    let mut make = |per: usize| -> SplitData<F> {
        let mut inputs = Vec::with_capacity(classes * per * dim);
        let mut labels = Vec::with_capacity(classes * per);
        for (cls, center) in centers.iter().enumerate() {
            for _ in 0..per {
                for &cv in center {
                    inputs.push(F::from_f64(cv + rng.standard_normal()));
                }
                labels.push(cls);
            }
        }
        SplitData {
            inputs,
            width: dim,
            targets: Targets::Labels(labels),
        }
    };
    let train = make(per_train);
    let test = make(per_test);
    Ok(Dataset {
        task: TaskKind::Classification,
        classes,
        train,
        test,
        name: "gaussian_blobs".into(),
    })
}

/// 6 x 6 checkerboard of alternating labels, points jittered inside each
/// cell. The best halfplane lands near 58% on it, so linear models stay
/// close to chance while anything nonlinear can solve it.
fn xor_grid<F: Scalar>(per_cell: usize, noise: f64, seed: u64) -> Result<Dataset<F>> {
    if per_cell == 0 {
        return Err(Error::Config("per_cell must be positive".into()));
    }
    const BOARD: usize = 6;
    let mut rng = SeedRng::substream(seed, 12);
    let mut make = |per: usize| -> SplitData<F> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for cx in 0..BOARD {
            for cy in 0..BOARD {
                let label = (cx + cy) % 2;
                for _ in 0..per {
                    let x = cx as f64 + 0.1 + 0.8 * rng.uniform() + noise * rng.standard_normal();
                    let y = cy as f64 + 0.1 + 0.8 * rng.uniform() + noise * rng.standard_normal();
                    inputs.push(F::from_f64(x / BOARD as f64 * 2.0 - 1.0));
                    inputs.push(F::from_f64(y / BOARD as f64 * 2.0 - 1.0));
                    labels.push(label);
                }
            }
        }
        SplitData {
            inputs,
            width: 2,
            targets: Targets::Labels(labels),
        }
    };
    let train = make(per_cell);
    let test = make(per_cell / 2 + 1);
    Ok(Dataset {
        task: TaskKind::Classification,
        classes: 2,
        train,
        test,
        name: "xor_grid".into(),
    })
}

/// Build a dataset from its config form.
pub fn load<F: Scalar>(cfg: &DatasetConfig) -> Result<Dataset<F>> {
    match cfg {
        DatasetConfig::Idx {
            dir,
            train_limit,
            test_limit,
        } => load_idx_dir(Path::new(dir), *train_limit, *test_limit),
        DatasetConfig::Csv {
            path,
            features,
            target,
            window,
            horizon,
            split,
        } => load_csv_series(Path::new(path), features, target, *window, *horizon, *split),
        DatasetConfig::Synth { recipe, seed } => synth(recipe, *seed),
    }
}

// ── batching ────────────────────────────────────────────────────────

/// One minibatch: inputs [B, width] plus the matching target slice.
pub struct Batch<F> {
    pub inputs: Tensor<F>,
    pub labels: Vec<usize>,
    pub values: Option<Tensor<F>>,
}

/// Deterministic per-epoch shuffle; the final short batch is kept.
pub fn batches<F: Scalar>(
    split: &SplitData<F>,
    batch_size: usize,
    rng: &mut SeedRng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..split.len()).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Materialize a batch from sample indices.
pub fn gather<F: Scalar>(split: &SplitData<F>, idx: &[usize]) -> Batch<F> {
    let w = split.width;
    let mut inputs = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        inputs.extend_from_slice(&split.inputs[i * w..(i + 1) * w]);
    }
    let inputs = Tensor::new(vec![idx.len(), w], inputs).expect("batch shape");
    match &split.targets {
        Targets::Labels(l) => Batch {
            inputs,
            labels: idx.iter().map(|&i| l[i]).collect(),
            values: None,
        },
        Targets::Values { data, dim } => {
            let mut vals = Vec::with_capacity(idx.len() * dim);
            for &i in idx {
                vals.extend_from_slice(&data[i * dim..(i + 1) * dim]);
            }
            Batch {
                inputs,
                labels: Vec::new(),
                values: Some(Tensor::new(vec![idx.len(), *dim], vals).expect("target shape")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_idx_images(count: usize, rows: usize, cols: usize) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(count as u32).to_be_bytes());
        b.extend_from_slice(&(rows as u32).to_be_bytes());
        b.extend_from_slice(&(cols as u32).to_be_bytes());
        b.extend((0..count * rows * cols).map(|i| (i % 251) as u8));
        b
    }

    fn fake_idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_header_parses_expected_fields() {
        let bytes = fake_idx_images(3, 2, 2);
        let img = parse_idx_images(&bytes, Path::new("mem")).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (3, 2, 2));
    }

    #[test]
    fn idx_wrong_magic_reports_observed_value() {
        let mut bytes = fake_idx_images(1, 2, 2);
        bytes[3] = 0x99;
        let err = parse_idx_images(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("0x00000899"), "{err}");
    }

    #[test]
    fn idx_truncated_payload_is_format_error() {
        let mut bytes = fake_idx_images(3, 2, 2);
        bytes.pop();
        assert!(matches!(
            parse_idx_images(&bytes, Path::new("mem")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn idx_count_mismatch_between_files() {
        let dir = std::env::temp_dir().join(format!("mapnet_idx_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("imgs"), fake_idx_images(3, 2, 2)).unwrap();
        std::fs::write(dir.join("labs"), fake_idx_labels(&[0, 1])).unwrap();
        let r = load_idx_split::<f32>(&dir.join("imgs"), &dir.join("labs"), None);
        assert!(matches!(r, Err(Error::Data(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pixels_scaled_to_unit_interval() {
        let dir = std::env::temp_dir().join(format!("mapnet_idx2_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("imgs"), fake_idx_images(2, 2, 2)).unwrap();
        std::fs::write(dir.join("labs"), fake_idx_labels(&[3, 9])).unwrap();
        let (split, classes) =
            load_idx_split::<f64>(&dir.join("imgs"), &dir.join("labs"), None).unwrap();
        assert_eq!(classes, 10);
        assert!(split.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn series_window_count_matches_arithmetic() {
        // length 10, window 3, horizon 1 -> 6 eligible samples before split
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let ds = series_windows::<f64>(&rows, 1, 3, 1, 0.8, "t").unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 6);
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let rows: Vec<Vec<f64>> = (0..20).map(|_| vec![5.0, 5.0]).collect();
        let ds = series_windows::<f64>(&rows, 1, 3, 1, 0.8, "t").unwrap();
        assert!(ds.train.inputs.iter().all(|&v| v == 0.0));
        match &ds.train.targets {
            Targets::Values { data, .. } => assert!(data.iter().all(|&v| v == 0.0)),
            _ => panic!("regression targets expected"),
        }
    }

    #[test]
    fn csv_non_numeric_cell_reports_row_and_column() {
        let dir = std::env::temp_dir().join(format!("mapnet_csv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("series.csv");
        std::fs::write(&p, "a,b\n1,2\n3,oops\n5,6\n").unwrap();
        let err = load_csv_series::<f64>(&p, &["a".into()], "b", 1, 1, 0.8)
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 3") && err.contains('b'), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn normalization_fits_on_train_rows_only() {
        // test rows exceed the train range, so normalized test features
        // must land outside [0, 1] (no leakage of test statistics)
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let v = if i < 25 { i as f64 } else { 100.0 + i as f64 };
                vec![v, v]
            })
            .collect();
        let ds = series_windows::<f64>(&rows, 1, 3, 1, 0.8, "t").unwrap();
        assert!(ds.train.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.test.inputs.iter().any(|&v| v > 1.0));
    }

    #[test]
    fn blobs_are_deterministic_per_seed() {
        let r = SynthRecipe::GaussianBlobs {
            classes: 3,
            dim: 4,
            per_class_train: 5,
            per_class_test: 2,
            separation: 10.0,
        };
        let a: Dataset<f64> = synth(&r, 7).unwrap();
        let b: Dataset<f64> = synth(&r, 7).unwrap();
        assert_eq!(a.train.inputs, b.train.inputs);
        let c: Dataset<f64> = synth(&r, 8).unwrap();
        assert_ne!(a.train.inputs, c.train.inputs);
    }

    #[test]
    fn batches_cover_split_exactly_once() {
        let r = SynthRecipe::GaussianBlobs {
            classes: 2,
            dim: 3,
            per_class_train: 13,
            per_class_test: 4,
            separation: 5.0,
        };
        let ds: Dataset<f64> = synth(&r, 3).unwrap();
        let mut rng = SeedRng::from_seed(5);
        let bs = batches(&ds.train, 4, &mut rng);
        let mut seen: Vec<usize> = bs.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..ds.train.len()).collect::<Vec<_>>());
        // final short batch kept: 26 samples at batch 4 -> 6*4 + 2
        assert_eq!(bs.last().unwrap().len(), 2);

        let mut rng2 = SeedRng::from_seed(5);
        let bs2 = batches(&ds.train, 4, &mut rng2);
        assert_eq!(bs, bs2);
    }

    #[test]
    fn oversized_batch_is_single_batch() {
        let r = SynthRecipe::XorGrid {
            per_cell: 3,
            noise: 0.05,
        };
        let ds: Dataset<f64> = synth(&r, 1).unwrap();
        let mut rng = SeedRng::from_seed(0);
        let bs = batches(&ds.train, 10_000, &mut rng);
        assert_eq!(bs.len(), 1);
        assert_eq!(bs[0].len(), ds.train.len());
    }
}
