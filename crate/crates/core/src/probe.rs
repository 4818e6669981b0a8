//! Parameter-trajectory probe: records per-layer snapshots during baseline
//! training and projects each layer's trajectory onto its principal
//! components, with explained-variance ratios.
//!
//! The snapshot matrix is T x n with T (snapshot count) far below n (layer
//! size), so the PCA runs on the T x T Gram matrix: for centered X with
//! thin SVD X = U S V^T, the Gram matrix is X X^T = U S^2 U^T, and the
//! projections X V = U S follow without ever forming V fully.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Snapshots for one layer: `rows` is T x width, row-major.
#[derive(Debug, Clone)]
pub struct LayerTrack {
    pub name: String,
    pub width: usize,
    pub rows: Vec<f64>,
}

impl LayerTrack {
    pub fn count(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.rows.len() / self.width
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotLog {
    pub layers: Vec<LayerTrack>,
    pub steps: Vec<u64>,
    cap_bytes: usize,
    bytes: usize,
}

impl SnapshotLog {
    pub fn new(layer_names: &[(String, usize)], cap_mb: usize) -> Self {
        SnapshotLog {
            layers: layer_names
                .iter()
                .map(|(name, width)| LayerTrack {
                    name: name.clone(),
                    width: *width,
                    rows: Vec::new(),
                })
                .collect(),
            steps: Vec::new(),
            cap_bytes: cap_mb.saturating_mul(1 << 20),
            bytes: 0,
        }
    }

    /// Append one flattened copy of every layer. Fails when the configured
    /// memory cap would be exceeded (record less often in that case).
    pub fn record(&mut self, step: u64, layers: &[Vec<f64>]) -> Result<()> {
        if layers.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} layers, log tracks {}",
                layers.len(),
                self.layers.len()
            )));
        }
        let add: usize = layers.iter().map(|l| l.len() * 8).sum();
        if self.bytes + add > self.cap_bytes {
            return Err(Error::Config(format!(
                "snapshot log would exceed its {} MiB cap at step {step}; increase probe.every_k or the cap",
                self.cap_bytes >> 20
            )));
        }
        for (track, data) in self.layers.iter_mut().zip(layers) {
            if data.len() != track.width {
                return Err(Error::Contract(format!(
                    "layer {}: snapshot width {} != {}",
                    track.name,
                    data.len(),
                    track.width
                )));
            }
            track.rows.extend_from_slice(data);
        }
        self.bytes += add;
        self.steps.push(step);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.steps.len()
    }
}

/// PCA output for one layer.
#[derive(Debug, Clone)]
pub struct LayerPca {
    pub name: String,
    /// T x components, row-major.
    pub projections: Vec<f64>,
    pub components: usize,
    /// Explained-variance ratio per component, non-increasing, sums <= 1.
    pub ratios: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (descending) and column eigenvectors, deterministically.
fn jacobi_eigh(mat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let vals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0f64; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + col] = v[k * n + src];
        }
    }
    (vals, vecs)
}

/// Gram-route PCA of one track. Mean-centers rows, eigendecomposes the
/// Gram (or covariance) matrix on the smaller side, and fixes each
/// component's sign so its largest-magnitude loading is positive.
pub fn pca_track(track: &LayerTrack, components: usize) -> Result<LayerPca> {
    let t = track.count();
    let n = track.width;
    if t < 2 {
        return Err(Error::Usage(format!(
            "pca needs at least 2 snapshots, layer {} has {t}",
            track.name
        )));
    }
    if components == 0 || components > t.min(n) {
        return Err(Error::Usage(format!(
            "components must lie in [1, min(T={t}, n={n})], got {components}"
        )));
    }

    // center
    let mut mean = vec![0.0f64; n];
    for row in track.rows.chunks(n) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let centered: Vec<f64> = track
        .rows
        .chunks(n)
        .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| v - m).collect::<Vec<_>>())
        .collect();

    if t <= n {
        pca_via_gram(track, &centered, t, n, components)
    } else {
        pca_via_covariance(track, &centered, t, n, components)
    }
}

/// Eigendecompose X X^T (T x T); the usual case, since layers are far
/// wider than the snapshot count.
fn pca_via_gram(
    track: &LayerTrack,
    centered: &[f64],
    t: usize,
    n: usize,
    components: usize,
) -> Result<LayerPca> {
    let mut gram = vec![0.0f64; t * t];
    for i in 0..t {
        for j in i..t {
            let mut acc = 0.0;
            let (ri, rj) = (&centered[i * n..(i + 1) * n], &centered[j * n..(j + 1) * n]);
            for (a, b) in ri.iter().zip(rj) {
                acc += a * b;
            }
            gram[i * t + j] = acc;
            gram[j * t + i] = acc;
        }
    }
    let total_var: f64 = (0..t).map(|i| gram[i * t + i]).sum();
    let (vals, vecs) = jacobi_eigh(&gram, t);
    let vals: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();

    let mut projections = vec![0.0f64; t * components];
    let mut ratios = Vec::with_capacity(components);
    for comp in 0..components {
        let lam = vals[comp];
        let sv = lam.sqrt();
        ratios.push(if total_var > 0.0 { lam / total_var } else { 0.0 });
        // projection column = u * s
        let mut col: Vec<f64> = (0..t).map(|k| vecs[k * t + comp] * sv).collect();
        // sign convention via the loading vector x^T u / s
        if sv > 1e-300 {
            let mut best_abs = -1.0f64;
            let mut best_val = 0.0f64;
            for f in 0..n {
                let mut acc = 0.0;
                for k in 0..t {
                    acc += centered[k * n + f] * vecs[k * t + comp];
                }
                let load = acc / sv;
                if load.abs() > best_abs {
                    best_abs = load.abs();
                    best_val = load;
                }
            }
            if best_val < 0.0 {
                for c in col.iter_mut() {
                    *c = -*c;
                }
            }
        }
        for k in 0..t {
            projections[k * components + comp] = col[k];
        }
    }
    Ok(LayerPca {
        name: track.name.clone(),
        projections,
        components,
        ratios,
    })
}

/// Eigendecompose X^T X (n x n) when snapshots outnumber features.
fn pca_via_covariance(
    track: &LayerTrack,
    centered: &[f64],
    t: usize,
    n: usize,
    components: usize,
) -> Result<LayerPca> {
    let mut cov = vec![0.0f64; n * n];
    for row in centered.chunks(n) {
        for i in 0..n {
            let ri = row[i];
            for j in i..n {
                cov[i * n + j] += ri * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            cov[i * n + j] = cov[j * n + i];
        }
    }
    let total_var: f64 = (0..n).map(|i| cov[i * n + i]).sum();
    let (vals, vecs) = jacobi_eigh(&cov, n);
    let vals: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();

    let mut projections = vec![0.0f64; t * components];
    let mut ratios = Vec::with_capacity(components);
    for comp in 0..components {
        ratios.push(if total_var > 0.0 { vals[comp] / total_var } else { 0.0 });
        // loading vector with the sign convention applied directly
        let mut load: Vec<f64> = (0..n).map(|f| vecs[f * n + comp]).collect();
        let mut best_abs = -1.0f64;
        let mut best_val = 0.0f64;
        for &l in &load {
            if l.abs() > best_abs {
                best_abs = l.abs();
                best_val = l;
            }
        }
        if best_val < 0.0 {
            for l in load.iter_mut() {
                *l = -*l;
            }
        }
        for (k, row) in centered.chunks(n).enumerate() {
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(&load) {
                acc += a * b;
            }
            projections[k * components + comp] = acc;
        }
    }
    Ok(LayerPca {
        name: track.name.clone(),
        projections,
        components,
        ratios,
    })
}

/// PCA for every layer in the log.
pub fn pca(log: &SnapshotLog, components: usize) -> Result<Vec<LayerPca>> {
    log.layers.iter().map(|t| pca_track(t, components)).collect()
}

/// Write one CSV per layer (step, pc1, pc2, ...) plus a summary of
/// explained-variance ratios. Returns the written paths.
pub fn report(log: &SnapshotLog, analyses: &[LayerPca], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for a in analyses {
        let path = dir.join(format!("{}.csv", a.name.replace(['.', '/'], "_")));
        let mut out = String::new();
        out.push_str("step");
        for c in 0..a.components {
            out.push_str(&format!(",pc{}", c + 1));
        }
        out.push('\n');
        for (k, &step) in log.steps.iter().enumerate() {
            out.push_str(&step.to_string());
            for c in 0..a.components {
                out.push_str(&format!(",{}", a.projections[k * a.components + c]));
            }
            out.push('\n');
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }
    let summary = dir.join("summary.csv");
    let mut out = String::from("layer");
    let max_c = analyses.iter().map(|a| a.components).max().unwrap_or(0);
    for c in 0..max_c {
        out.push_str(&format!(",ratio{}", c + 1));
    }
    out.push('\n');
    for a in analyses {
        out.push_str(&a.name);
        for c in 0..max_c {
            match a.ratios.get(c) {
                Some(r) => out.push_str(&format!(",{r}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(&summary, out)?;
    written.push(summary);
    Ok(written)
}
