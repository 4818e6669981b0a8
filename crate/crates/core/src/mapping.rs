//! Latent-to-parameter generation.
//!
//! A generator unit holds a small trainable latent vector `z` and a fixed
//! P x d matrix with orthonormal columns. The latent additively modulates
//! the matrix columns (w_ij <- w_ij + alpha * z_i), so the pre-activation
//! is quadratic in z:
//!
//!     a_j = sum_i W0[j][i] z_i + alpha * sum_i z_i^2
//!
//! and the emitted parameter vector is `out_scale * act(a)`. Only z is
//! trainable; the matrix is never written after initialization and never
//! receives gradients.
//!
//! Two arrangements cover a target network: a single unit for the whole
//! flat parameter vector, or one unit per layer group tiling it.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{checksum_f32, Tensor};
use crate::zoo::ParameterSpec;

/// Fixed generator matrix, stored in 32-bit regardless of compute
/// precision (the P x d buffer dominates memory at scale). Matvecs
/// convert entries to the compute precision on the fly.
#[derive(Debug)]
pub struct MapMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    col_means: Vec<f64>,
    row_norms_sq: Vec<f64>,
}

/// Row-block size for the transposed matvec reduction. Fixed so the
/// partial-sum order never depends on thread count.
const MT_BLOCK: usize = 8192;

impl MapMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn entry(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    /// Per-column mean over rows, used by the alignment term: the row-wise
    /// mean of the modulated matrix is `col_means + alpha * z` without ever
    /// materializing the modulated matrix.
    pub fn col_means(&self) -> &[f64] {
        &self.col_means
    }

    /// Per-row squared norms, used by the exact Jacobian-norm mode.
    pub fn row_norms_sq(&self) -> &[f64] {
        &self.row_norms_sq
    }

    pub fn checksum(&self) -> u64 {
        checksum_f32(&self.data)
    }

    /// y = W x
    pub fn matvec<F: Scalar>(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        let d = self.cols;
        let mut y = vec![F::ZERO; self.rows];
        let body = |(j, out): (usize, &mut F)| {
            let row = &self.data[j * d..(j + 1) * d];
            let mut acc = F::ZERO;
            for (&w, &xv) in row.iter().zip(x.iter()) {
                acc += F::from_f32(w) * xv;
            }
            *out = acc;
        };
        if self.rows >= 256 {
            y.par_iter_mut().enumerate().for_each(body);
        } else {
            y.iter_mut().enumerate().for_each(body);
        }
        y
    }

    /// y = W^T u, reduced over fixed row blocks in block order.
    pub fn matvec_t<F: Scalar>(&self, u: &[F]) -> Vec<F> {
        debug_assert_eq!(u.len(), self.rows);
        let d = self.cols;
        let partials: Vec<Vec<F>> = self
            .data
            .par_chunks(MT_BLOCK * d)
            .zip(u.par_chunks(MT_BLOCK))
            .map(|(rows, us)| {
                let mut acc = vec![F::ZERO; d];
                for (row, &uv) in rows.chunks(d).zip(us.iter()) {
                    for (a, &w) in acc.iter_mut().zip(row.iter()) {
                        *a += F::from_f32(w) * uv;
                    }
                }
                acc
            })
            .collect();
        let mut y = vec![F::ZERO; d];
        for p in partials {
            for (a, v) in y.iter_mut().zip(p) {
                *a += v;
            }
        }
        y
    }
}

// ── orthogonal initialization ───────────────────────────────────────

fn gaussian_block(rng: &mut SeedRng, rows: usize, cols: usize) -> Vec<f64> {
    let mut block = vec![0.0f64; rows * cols];
    rng.fill_standard_normal(&mut block);
    block
}

/// Cholesky factor R (upper, positive diagonal) of a symmetric positive
/// definite matrix given in row-major order.
fn cholesky_upper(g: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut r = vec![0.0f64; d * d];
    for i in 0..d {
        let mut diag = g[i * d + i];
        for k in 0..i {
            diag -= r[k * d + i] * r[k * d + i];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::Numeric(format!(
                "cholesky pivot {i} is not positive ({diag}); matrix not full rank"
            )));
        }
        let rii = diag.sqrt();
        r[i * d + i] = rii;
        for j in i + 1..d {
            let mut v = g[i * d + j];
            for k in 0..i {
                v -= r[k * d + i] * r[k * d + j];
            }
            r[i * d + j] = v / rii;
        }
    }
    Ok(r)
}

/// Inverse of an upper triangular matrix with positive diagonal.
fn upper_tri_inverse(r: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0f64; d * d];
    for j in (0..d).rev() {
        inv[j * d + j] = 1.0 / r[j * d + j];
        for i in (0..j).rev() {
            let mut acc = 0.0;
            for k in i + 1..=j {
                acc += r[i * d + k] * inv[k * d + j];
            }
            inv[i * d + j] = -acc / r[i * d + i];
        }
    }
    inv
}

/// Accumulate G += A^T A for a row block.
fn accumulate_gram(g: &mut [f64], block: &[f64], rows: usize, d: usize) {
    let prod = kernels::matmul_tn(block, block, d, rows, d);
    for (a, v) in g.iter_mut().zip(prod) {
        *a += v;
    }
}

/// Orthonormal-column matrix from the QR decomposition of a seeded
/// Gaussian P x d matrix.
///
/// Computed as a streamed Cholesky QR: the Gaussian matrix is regenerated
/// block-by-block from the seed on each pass, so the f64 intermediate is
/// never fully materialized. Cholesky produces R with a positive diagonal,
/// which makes Q the unique thin-QR factor under the positive-diagonal
/// sign convention. Near-square shapes get a second refinement pass where
/// the single-pass bound is too loose.
pub fn init_orthogonal(p: usize, d: usize, seed: u64) -> Result<MapMatrix> {
    if d == 0 {
        return Err(Error::Config("latent dimension must be at least 1".into()));
    }
    if d > p {
        return Err(Error::Config(format!(
            "latent dimension {d} exceeds output size {p}; generation needs d <= P"
        )));
    }
    let block_rows = ((32usize << 20) / (8 * d)).max(64).min(p);

    // pass 1: Gram matrix of the Gaussian draw
    let mut g = vec![0.0f64; d * d];
    let mut rng = SeedRng::substream(seed, 0);
    let mut r0 = 0;
    while r0 < p {
        let rows = block_rows.min(p - r0);
        let block = gaussian_block(&mut rng, rows, d);
        accumulate_gram(&mut g, &block, rows, d);
        r0 += rows;
    }
    let r1 = cholesky_upper(&g, d)?;
    let rinv1 = upper_tri_inverse(&r1, d);

    // pass 2: Q = A R^-1, regenerating A from the same stream
    let mut data = vec![0.0f32; p * d];
    let mut rng = SeedRng::substream(seed, 0);
    let mut r0 = 0;
    while r0 < p {
        let rows = block_rows.min(p - r0);
        let block = gaussian_block(&mut rng, rows, d);
        let q = kernels::matmul_nn(&block, &rinv1, rows, d, d);
        for (dst, src) in data[r0 * d..(r0 + rows) * d].iter_mut().zip(q) {
            *dst = src as f32;
        }
        r0 += rows;
    }

    // Refinement pass for shapes where the Gaussian can be ill conditioned.
    if p < 2 * d {
        let mut g2 = vec![0.0f64; d * d];
        let mut r0 = 0;
        while r0 < p {
            let rows = block_rows.min(p - r0);
            let block: Vec<f64> = data[r0 * d..(r0 + rows) * d]
                .iter()
                .map(|&v| v as f64)
                .collect();
            accumulate_gram(&mut g2, &block, rows, d);
            r0 += rows;
        }
        let r2 = cholesky_upper(&g2, d)?;
        let rinv2 = upper_tri_inverse(&r2, d);
        let mut r0 = 0;
        while r0 < p {
            let rows = block_rows.min(p - r0);
            let block: Vec<f64> = data[r0 * d..(r0 + rows) * d]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let q = kernels::matmul_nn(&block, &rinv2, rows, d, d);
            for (dst, src) in data[r0 * d..(r0 + rows) * d].iter_mut().zip(q) {
                *dst = src as f32;
            }
            r0 += rows;
        }
    }

    // fused statistics pass over the final 32-bit entries
    let mut col_sums = vec![0.0f64; d];
    let mut row_norms_sq = vec![0.0f64; p];
    for (j, row) in data.chunks(d).enumerate() {
        let mut rn = 0.0f64;
        for (cs, &w) in col_sums.iter_mut().zip(row.iter()) {
            let wf = w as f64;
            *cs += wf;
            rn += wf * wf;
        }
        row_norms_sq[j] = rn;
    }
    let col_means: Vec<f64> = col_sums.into_iter().map(|s| s / p as f64).collect();

    Ok(MapMatrix {
        rows: p,
        cols: d,
        data,
        col_means,
        row_norms_sq,
    })
}

/// Max-norm of W^T W - I, measured in f64. Cost is O(P d^2); intended for
/// tests and audits, not training loops.
pub fn orthonormality_defect(m: &MapMatrix) -> f64 {
    let (p, d) = (m.rows, m.cols);
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0f64;
            for r in 0..p {
                acc += m.data[r * d + i] as f64 * m.data[r * d + j] as f64;
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((acc - target).abs());
        }
    }
    worst
}

/// Process-wide single-slot cache: repeated runs with the same (P, d, seed)
/// reuse the already initialized matrix. Values are immutable, so the cache
/// is observationally transparent.
static W0_CACHE: Mutex<Option<((usize, usize, u64), Arc<MapMatrix>)>> = Mutex::new(None);

pub fn init_orthogonal_cached(p: usize, d: usize, seed: u64) -> Result<Arc<MapMatrix>> {
    {
        let cache = W0_CACHE.lock().unwrap();
        if let Some((key, m)) = cache.as_ref() {
            if *key == (p, d, seed) {
                return Ok(Arc::clone(m));
            }
        }
    }
    let m = Arc::new(init_orthogonal(p, d, seed)?);
    *W0_CACHE.lock().unwrap() = Some(((p, d, seed), Arc::clone(&m)));
    Ok(m)
}

// ── modulation and generation ───────────────────────────────────────

/// Activation applied to the generator pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

/// Materialize the modulated matrix W_mod[j][i] = W0[j][i] + alpha * z[i].
/// Dense O(P d); meant for small instances and tests. Training paths use
/// the fused quadratic form instead.
pub fn modulate<F: Scalar>(w0: &MapMatrix, z: &[F], alpha: F) -> Result<Vec<F>> {
    if z.len() != w0.cols {
        return Err(Error::Contract(format!(
            "modulate: latent length {} != column count {}",
            z.len(),
            w0.cols
        )));
    }
    let d = w0.cols;
    let mut out = vec![F::ZERO; w0.rows * d];
    for (dst, row) in out.chunks_mut(d).zip(w0.data.chunks(d)) {
        for ((o, &w), &zi) in dst.iter_mut().zip(row.iter()).zip(z.iter()) {
            *o = F::from_f32(w) + alpha * zi;
        }
    }
    Ok(out)
}

/// One generator unit: trainable latent + fixed matrix + hyperparameters.
#[derive(Debug, Clone)]
pub struct MappingState<F> {
    pub z: Vec<F>,
    pub w0: Arc<MapMatrix>,
    pub alpha: F,
    pub activation: Activation,
    pub out_scale: F,
    /// Scale z was initialized at; optimizer steps stay proportional to it.
    pub z_init_std: F,
    /// Seed the matrix is reconstructed from; checkpoints store this, never
    /// the matrix itself.
    pub w0_seed: u64,
}

impl<F: Scalar> MappingState<F> {
    pub fn new(
        p: usize,
        d: usize,
        w0_seed: u64,
        alpha: F,
        activation: Activation,
        out_scale: F,
        z_init_std: F,
        z_rng: &mut SeedRng,
    ) -> Result<Self> {
        let w0 = init_orthogonal_cached(p, d, w0_seed)?;
        let z: Vec<F> = (0..d)
            .map(|_| F::from_f64(z_rng.standard_normal()) * z_init_std)
            .collect();
        Ok(MappingState {
            z,
            w0,
            alpha,
            activation,
            out_scale,
            z_init_std,
            w0_seed,
        })
    }

    pub fn d(&self) -> usize {
        self.w0.cols()
    }

    pub fn p(&self) -> usize {
        self.w0.rows()
    }

    pub fn z_tensor(&self) -> Tensor<F> {
        Tensor::from_vec(self.z.clone())
    }
}

/// Tape handles produced by one generator evaluation. The intermediate
/// nodes are exposed so the regularization terms can reuse them instead of
/// rebuilding P-sized subgraphs.
#[derive(Debug, Clone, Copy)]
pub struct Generated {
    pub z: Var,
    /// W0 z
    pub matvec: Var,
    /// sum of z_i^2
    pub sumsq: Var,
    /// a = W0 z + alpha * sumsq
    pub preact: Var,
    /// act(a), before out_scale
    pub act: Var,
    /// out_scale * act(a)
    pub theta: Var,
}

fn apply_activation<F: Scalar>(tape: &mut Tape<F>, activation: Activation, a: Var) -> Var {
    match activation {
        Activation::Tanh => tape.tanh(a),
        Activation::Linear => a,
    }
}

/// Emit theta_hat for one unit. Gradients reach z only.
pub fn generate<F: Scalar>(tape: &mut Tape<F>, st: &MappingState<F>, z: Var) -> Result<Generated> {
    if tape.value(z).shape() != [st.d()] {
        return Err(Error::Contract(format!(
            "generate: latent var has shape {:?}, state expects [{}]",
            tape.value(z).shape(),
            st.d()
        )));
    }
    let matvec = tape.map_matvec(&st.w0, z)?;
    let sumsq = tape.frobenius_norm_sq(z);
    let quad = tape.scale(sumsq, st.alpha);
    let preact = tape.add(matvec, quad)?;
    let act = apply_activation(tape, st.activation, preact);
    let theta = tape.scale(act, st.out_scale);
    Ok(Generated {
        z,
        matvec,
        sumsq,
        preact,
        act,
        theta,
    })
}

/// Emit theta_hat(z + eps) while reusing the base matvec node: since
/// W0 (z + eps) = W0 z + W0 eps and eps is a constant, the perturbed branch
/// adds a constant vector to the existing matvec instead of paying a second
/// P x d pass, and its gradient folds into the same node.
pub fn generate_perturbed<F: Scalar>(
    tape: &mut Tape<F>,
    st: &MappingState<F>,
    base: &Generated,
    eps: &[F],
) -> Result<Generated> {
    if eps.len() != st.d() {
        return Err(Error::Contract(format!(
            "generate_perturbed: eps length {} != d {}",
            eps.len(),
            st.d()
        )));
    }
    let w0_eps = st.w0.matvec(eps);
    let w0_eps = tape.constant(Tensor::from_vec(w0_eps));
    let matvec = tape.add(base.matvec, w0_eps)?;
    let eps_leaf = tape.constant(Tensor::from_vec(eps.to_vec()));
    let zp = tape.add(base.z, eps_leaf)?;
    let sumsq = tape.frobenius_norm_sq(zp);
    let quad = tape.scale(sumsq, st.alpha);
    let preact = tape.add(matvec, quad)?;
    let act = apply_activation(tape, st.activation, preact);
    let theta = tape.scale(act, st.out_scale);
    Ok(Generated {
        z: zp,
        matvec,
        sumsq,
        preact,
        act,
        theta,
    })
}

/// Variant generator where a separate trainable vector (not the latent)
/// modulates the matrix: a = W0 z + alpha * <m, z>.
pub fn generate_separate_mod<F: Scalar>(
    tape: &mut Tape<F>,
    st: &MappingState<F>,
    z: Var,
    m: Var,
) -> Result<Generated> {
    if tape.value(m).shape() != [st.d()] {
        return Err(Error::Contract(format!(
            "generate_separate_mod: modulator has shape {:?}, expected [{}]",
            tape.value(m).shape(),
            st.d()
        )));
    }
    let matvec = tape.map_matvec(&st.w0, z)?;
    let prod = tape.mul(m, z)?;
    let dot = tape.sum(prod);
    let quad = tape.scale(dot, st.alpha);
    let preact = tape.add(matvec, quad)?;
    let act = apply_activation(tape, st.activation, preact);
    let theta = tape.scale(act, st.out_scale);
    Ok(Generated {
        z,
        matvec,
        sumsq: dot,
        preact,
        act,
        theta,
    })
}

/// Variant generator with the matrix materialized as a dense trainable
/// tape tensor (ablations only; rejected at scale by config validation).
pub fn generate_dense<F: Scalar>(
    tape: &mut Tape<F>,
    w: Var,
    z: Var,
    alpha: F,
    activation: Activation,
    out_scale: F,
) -> Result<Generated> {
    let d = tape.value(z).numel();
    let p = tape.value(w).shape()[0];
    let zc = tape.reshape(z, vec![d, 1])?;
    let mv = tape.matmul(w, zc)?;
    let matvec = tape.reshape(mv, vec![p])?;
    let sumsq = tape.frobenius_norm_sq(z);
    let quad = tape.scale(sumsq, alpha);
    let preact = tape.add(matvec, quad)?;
    let act = apply_activation(tape, activation, preact);
    let theta = tape.scale(act, out_scale);
    Ok(Generated {
        z,
        matvec,
        sumsq,
        preact,
        act,
        theta,
    })
}

// ── partition ───────────────────────────────────────────────────────

/// Slice a flat parameter vector at the spec offsets and reshape each
/// piece to its layer shape. Concatenating the flattened outputs
/// reproduces the input bit-exactly, and gradients flow through the
/// slices.
pub fn partition<F: Scalar>(
    tape: &mut Tape<F>,
    theta: Var,
    spec: &ParameterSpec,
) -> Result<Vec<Var>> {
    partition_range(tape, theta, spec, 0..spec.layers().len(), 0)
}

/// Partition a unit's slice of the spec; `base` is the unit's offset into
/// the full flat vector.
pub fn partition_range<F: Scalar>(
    tape: &mut Tape<F>,
    theta: Var,
    spec: &ParameterSpec,
    range: std::ops::Range<usize>,
    base: usize,
) -> Result<Vec<Var>> {
    let expect: usize = range.clone().map(|i| spec.layers()[i].size()).sum();
    let got = tape.value(theta).numel();
    if got != expect {
        return Err(Error::Contract(format!(
            "partition: flat vector has {got} entries, spec range expects {expect}"
        )));
    }
    let mut out = Vec::with_capacity(range.len());
    for i in range {
        let l = &spec.layers()[i];
        let s = tape.slice(theta, spec.offset(i) - base, l.size())?;
        out.push(tape.reshape(s, l.shape.clone())?);
    }
    Ok(out)
}

// ── plans ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Slvt,
    Lwt,
}

/// One generator unit plus the contiguous slice of the spec it covers.
#[derive(Debug)]
pub struct PlanUnit<F> {
    pub name: String,
    pub state: MappingState<F>,
    pub layer_range: std::ops::Range<usize>,
    pub offset: usize,
    pub size: usize,
}

/// Units tiling a parameter spec with no gaps or overlaps.
#[derive(Debug)]
pub struct MappingPlan<F> {
    pub mode: PlanMode,
    pub spec: ParameterSpec,
    pub units: Vec<PlanUnit<F>>,
}

/// Generator hyperparameters shared by plan construction.
#[derive(Debug, Clone, Copy)]
pub struct GenHyper<F> {
    pub alpha: F,
    pub activation: Activation,
    pub out_scale: Option<F>,
    pub z_init_std: Option<F>,
    /// Reject units with d > P / guard_ratio. 1 disables the margin.
    pub guard_ratio: usize,
}

/// Default (out_scale, z_init_std) for a P x d unit.
///
/// Two facts drive these. For orthonormal columns the spread of (W0 z)
/// across the P outputs is ||z|| / sqrt(P) no matter what d is, while the
/// modulation adds the same alpha * ||z||^2 to every output. The initial
/// latent norm is pinned at min(1, c / (alpha sqrt(P))) with c = 0.1, so
/// the shared modulation shift stays a fraction of the per-parameter
/// spread instead of drowning it; out_scale then lifts that spread to a
/// trainable ~0.08.
pub fn default_scales(p: usize, d: usize, alpha: f64) -> (f64, f64) {
    let p_sqrt = (p as f64).sqrt();
    let z_norm = if alpha > 0.0 {
        (0.1 / (alpha * p_sqrt)).min(1.0)
    } else {
        1.0
    };
    let out_scale = 0.08 * p_sqrt / z_norm;
    let z_init_std = z_norm / (d as f64).sqrt();
    (out_scale, z_init_std)
}

fn resolve_scales<F: Scalar>(hyper: &GenHyper<F>, p: usize, d: usize) -> (F, F) {
    let (out_scale, z_std) = default_scales(p, d, hyper.alpha.to_f64());
    (
        hyper.out_scale.unwrap_or(F::from_f64(out_scale)),
        hyper.z_init_std.unwrap_or(F::from_f64(z_std)),
    )
}

fn check_guard(p: usize, d: usize, ratio: usize, what: &str) -> Result<()> {
    if ratio == 0 {
        return Err(Error::Config("guard ratio must be at least 1".into()));
    }
    if d * ratio > p {
        return Err(Error::Config(format!(
            "{what}: latent dimension {d} violates d <= P/{ratio} for P = {p}; lower d or the guard ratio"
        )));
    }
    Ok(())
}

/// Single-unit plan: one latent generates the whole flat vector.
pub fn slvt_plan<F: Scalar>(
    spec: &ParameterSpec,
    d: usize,
    hyper: &GenHyper<F>,
    init_seed: u64,
    z_rng: &mut SeedRng,
) -> Result<MappingPlan<F>> {
    let p = spec.flat_size();
    check_guard(p, d, hyper.guard_ratio, "slvt")?;
    let (out_scale, z_std) = resolve_scales(hyper, p, d);
    let state = MappingState::new(
        p,
        d,
        init_seed,
        hyper.alpha,
        hyper.activation,
        out_scale,
        z_std,
        z_rng,
    )?;
    Ok(MappingPlan {
        mode: PlanMode::Slvt,
        spec: spec.clone(),
        units: vec![PlanUnit {
            name: "all".into(),
            state,
            layer_range: 0..spec.layers().len(),
            offset: 0,
            size: p,
        }],
    })
}

/// Split a latent budget across layer groups proportionally to the square
/// root of each group's size, with a floor of 8, clamped to each group's
/// guard cap, then nudged to hit the budget exactly.
pub fn lwt_latent_sizes(
    group_sizes: &[usize],
    budget: usize,
    guard_ratio: usize,
) -> Result<Vec<usize>> {
    let n = group_sizes.len();
    if n == 0 {
        return Err(Error::Config("no layer groups to size".into()));
    }
    let caps: Vec<usize> = group_sizes
        .iter()
        .map(|&p| (p / guard_ratio.max(1)).max(1))
        .collect();
    let floors: Vec<usize> = caps.iter().map(|&c| c.min(8)).collect();
    let min_total: usize = floors.iter().sum();
    let max_total: usize = caps.iter().sum();
    if budget < min_total || budget > max_total {
        return Err(Error::Config(format!(
            "latent budget {budget} infeasible: group floors sum to {min_total}, caps sum to {max_total}"
        )));
    }
    let weight_sum: f64 = group_sizes.iter().map(|&p| (p as f64).sqrt()).sum();
    let mut sizes: Vec<usize> = group_sizes
        .iter()
        .zip(&caps)
        .zip(&floors)
        .map(|((&p, &cap), &floor)| {
            let ideal = budget as f64 * (p as f64).sqrt() / weight_sum;
            (ideal.round() as usize).clamp(floor, cap)
        })
        .collect();
    // Nudge toward the exact budget, largest slack first; ordering is
    // deterministic (stable index tie-break).
    loop {
        let total: usize = sizes.iter().sum();
        if total == budget {
            break;
        }
        if total < budget {
            let i = (0..n)
                .filter(|&i| sizes[i] < caps[i])
                .max_by_key(|&i| (caps[i] - sizes[i], std::cmp::Reverse(i)))
                .ok_or_else(|| Error::Config("latent budget exceeds group caps".into()))?;
            sizes[i] += 1;
        } else {
            let i = (0..n)
                .filter(|&i| sizes[i] > floors[i])
                .max_by_key(|&i| (sizes[i] - floors[i], std::cmp::Reverse(i)))
                .ok_or_else(|| Error::Config("latent budget below group floors".into()))?;
            sizes[i] -= 1;
        }
    }
    Ok(sizes)
}

/// Per-layer-group plan: one unit per group, tiling the spec in order.
pub fn lwt_plan<F: Scalar>(
    spec: &ParameterSpec,
    budget: usize,
    hyper: &GenHyper<F>,
    init_seed: u64,
    z_rng: &mut SeedRng,
) -> Result<MappingPlan<F>> {
    let groups = spec.layer_groups();
    let group_sizes: Vec<usize> = groups
        .iter()
        .map(|(_, r)| r.clone().map(|i| spec.layers()[i].size()).sum())
        .collect();
    let latents = lwt_latent_sizes(&group_sizes, budget, hyper.guard_ratio)?;
    let mut units = Vec::with_capacity(groups.len());
    for (((name, range), &p_u), &d_u) in groups.iter().zip(&group_sizes).zip(&latents) {
        check_guard(p_u, d_u, hyper.guard_ratio, name)?;
        let (out_scale, z_std) = resolve_scales(hyper, p_u, d_u);
        // distinct matrix per unit: offset the seed by the unit's position
        let seed_u = init_seed.wrapping_add(range.start as u64 + 1);
        let state = MappingState::new(
            p_u,
            d_u,
            seed_u,
            hyper.alpha,
            hyper.activation,
            out_scale,
            z_std,
            z_rng,
        )?;
        units.push(PlanUnit {
            name: name.clone(),
            state,
            layer_range: range.clone(),
            offset: spec.offset(range.start),
            size: p_u,
        });
    }
    let plan = MappingPlan {
        mode: PlanMode::Lwt,
        spec: spec.clone(),
        units,
    };
    debug_assert!(plan.tiles_spec());
    Ok(plan)
}

impl<F: Scalar> MappingPlan<F> {
    /// Units must cover the flat vector contiguously with no gaps.
    pub fn tiles_spec(&self) -> bool {
        let mut off = 0;
        for u in &self.units {
            if u.offset != off {
                return false;
            }
            off += u.size;
        }
        off == self.spec.flat_size()
    }

    /// Total trainable latent scalars (coefficients counted elsewhere).
    pub fn latent_count(&self) -> usize {
        self.units.iter().map(|u| u.state.d()).sum()
    }

    /// Bytes held by the fixed matrices.
    pub fn matrix_bytes(&self) -> usize {
        self.units
            .iter()
            .map(|u| u.state.w0.rows() * u.state.w0.cols() * 4)
            .sum()
    }

    pub fn w0_checksums(&self) -> Vec<u64> {
        self.units.iter().map(|u| u.state.w0.checksum()).collect()
    }
}

/// Per-unit tape handles from one full generation.
pub struct UnitGen {
    pub gen: Generated,
}

pub struct GenerationOutput {
    /// One entry per unit, in plan order.
    pub units: Vec<UnitGen>,
    /// Layer tensors in spec order, ready for the target forward.
    pub params: Vec<Var>,
}

/// Add each unit's latent as a trainable leaf, generate, and partition.
pub fn generate_all<F: Scalar>(tape: &mut Tape<F>, plan: &MappingPlan<F>) -> Result<GenerationOutput> {
    let mut units = Vec::with_capacity(plan.units.len());
    let mut params = Vec::with_capacity(plan.spec.layers().len());
    for u in &plan.units {
        let z = tape.leaf(u.state.z_tensor(), true);
        let gen = generate(tape, &u.state, z)?;
        let layer_vars =
            partition_range(tape, gen.theta, &plan.spec, u.layer_range.clone(), u.offset)?;
        params.extend(layer_vars);
        units.push(UnitGen { gen });
    }
    Ok(GenerationOutput { units, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_columns_small() {
        for &(p, d, seed) in &[(40usize, 7usize, 3u64), (9, 9, 5), (200, 13, 11), (5, 1, 0)] {
            let m = init_orthogonal(p, d, seed).unwrap();
            let defect = orthonormality_defect(&m);
            assert!(defect < 1e-5, "p={p} d={d}: defect {defect}");
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = init_orthogonal(57, 6, 99).unwrap();
        let b = init_orthogonal(57, 6, 99).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.checksum(), b.checksum());
        let c = init_orthogonal(57, 6, 100).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn d1_column_has_unit_norm() {
        let m = init_orthogonal(33, 1, 4).unwrap();
        let n: f64 = m.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        assert!((n - 1.0).abs() < 1e-6, "norm^2 {n}");
    }

    #[test]
    fn d_greater_than_p_rejected() {
        assert!(matches!(init_orthogonal(3, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn modulate_alpha_zero_is_identity() {
        let m = init_orthogonal(12, 3, 7).unwrap();
        let z = vec![0.5f32, -1.0, 2.0];
        let out = modulate(&m, &z, 0.0).unwrap();
        let direct: Vec<f32> = m.data().to_vec();
        assert_eq!(out, direct);
        let out_z0 = modulate(&m, &[0.0f32; 3], 0.7).unwrap();
        assert_eq!(out_z0, direct);
    }

    #[test]
    fn modulate_hand_case() {
        // identity 2x2, alpha 0.5, z = (1, 2)
        let m = MapMatrix {
            rows: 2,
            cols: 2,
            data: vec![1.0, 0.0, 0.0, 1.0],
            col_means: vec![0.5, 0.5],
            row_norms_sq: vec![1.0, 1.0],
        };
        let out = modulate(&m, &[1.0f64, 2.0], 0.5).unwrap();
        assert_eq!(out, vec![1.5, 1.0, 0.5, 2.0]);
    }

    #[test]
    fn matvec_transpose_consistent() {
        let m = init_orthogonal(30, 4, 2).unwrap();
        let x = vec![0.3f64, -0.2, 1.0, 0.5];
        let y = m.matvec(&x);
        // <Wx, Wx> == <x, W^T W x> == <x, x> for orthonormal W
        let back = m.matvec_t(&y);
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let xb: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        // 32-bit storage bounds the orthonormality defect near 1e-7
        assert!((xx - xb).abs() < 1e-6, "{xx} vs {xb}");
    }

    fn small_state(p: usize, d: usize, alpha: f64, act: Activation, scale: f64) -> MappingState<f64> {
        let mut rng = SeedRng::from_seed(5);
        let mut st = MappingState::new(p, d, 17, alpha, act, scale, 0.3, &mut rng).unwrap();
        // overwrite cache interference in tests: states are independent
        st.z = {
            let mut r = SeedRng::from_seed(8);
            (0..d).map(|_| r.standard_normal() * 0.5).collect()
        };
        st
    }

    #[test]
    fn generate_zero_latent_tanh_gives_zero() {
        let mut st = small_state(20, 4, 0.1, Activation::Tanh, 1.0);
        st.z = vec![0.0; 4];
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(st.z_tensor(), true);
        let g = generate(&mut tape, &st, z).unwrap();
        assert!(tape.value(g.theta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generate_linear_alpha_zero_is_plain_matvec() {
        let st = small_state(20, 4, 0.0, Activation::Linear, 1.0);
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(st.z_tensor(), true);
        let g = generate(&mut tape, &st, z).unwrap();
        let direct = st.w0.matvec(&st.z);
        assert_eq!(tape.value(g.theta).data(), direct.as_slice());
    }

    #[test]
    fn partition_hand_case() {
        use crate::zoo::{LayerParam, ParamRole};
        let spec = ParameterSpec::new(vec![
            LayerParam {
                name: "fc1.weight".into(),
                role: ParamRole::FcWeight,
                shape: vec![2, 2],
            },
            LayerParam {
                name: "fc1.bias".into(),
                role: ParamRole::FcBias,
                shape: vec![2],
            },
        ])
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(Tensor::from_vec(vec![1., 2., 3., 4., 5., 6.]), true);
        let parts = partition(&mut tape, theta, &spec).unwrap();
        assert_eq!(tape.value(parts[0]).shape(), &[2, 2]);
        assert_eq!(tape.value(parts[0]).data(), &[1., 2., 3., 4.]);
        assert_eq!(tape.value(parts[1]).data(), &[5., 6.]);
    }

    #[test]
    fn partition_roundtrip_bit_exact() {
        use crate::zoo::{build_spec, TargetArchitecture};
        let spec = build_spec(&TargetArchitecture::Mlp {
            input: 5,
            hidden: vec![4],
            classes: 3,
        })
        .unwrap();
        let mut rng = SeedRng::from_seed(21);
        let data: Vec<f64> = (0..spec.flat_size()).map(|_| rng.standard_normal()).collect();
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(Tensor::from_vec(data), true);
        let parts = partition(&mut tape, theta, &spec).unwrap();
        let flats: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let n = tape.value(p).numel();
                tape.reshape(p, vec![n]).unwrap()
            })
            .collect();
        let back = tape.concat(&flats).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(theta)));
    }

    #[test]
    fn partition_size_mismatch_names_counts() {
        use crate::zoo::{build_spec, TargetArchitecture};
        let spec = build_spec(&TargetArchitecture::Mlp {
            input: 5,
            hidden: vec![],
            classes: 3,
        })
        .unwrap();
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(Tensor::from_vec(vec![0.0; 7]), true);
        let err = partition(&mut tape, theta, &spec).unwrap_err().to_string();
        assert!(err.contains('7') && err.contains(&spec.flat_size().to_string()), "{err}");
    }

    #[test]
    fn lwt_sizes_hit_budget_exactly() {
        let groups = vec![208, 3216, 101_258, 3950];
        let sizes = lwt_latent_sizes(&groups, 2688, 10).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 2688);
        for (s, g) in sizes.iter().zip(&groups) {
            assert!(*s >= 8 && *s * 10 <= *g, "size {s} for group {g}");
        }
    }

    #[test]
    fn lwt_infeasible_budget_is_config_error() {
        let groups = vec![100, 100];
        assert!(matches!(
            lwt_latent_sizes(&groups, 1000, 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn alpha_continuity_linear_in_alpha() {
        // linear activation: theta(alpha) - theta(0) = out_scale * alpha * sum(z^2) * ones
        let base = small_state(30, 5, 0.0, Activation::Linear, 1.0);
        let sumsq: f64 = base.z.iter().map(|v| v * v).sum();
        let norm_at = |alpha: f64| {
            let mut st = base.clone();
            st.alpha = alpha;
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(st.z_tensor(), true);
            let g = generate(&mut tape, &st, z).unwrap();
            let g0 = {
                let mut st0 = base.clone();
                st0.alpha = 0.0;
                let mut t0 = Tape::<f64>::new();
                let z0 = t0.leaf(st0.z_tensor(), true);
                let gg = generate(&mut t0, &st0, z0).unwrap();
                t0.value(gg.theta).data().to_vec()
            };
            let diff: f64 = tape
                .value(g.theta)
                .data()
                .iter()
                .zip(&g0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            diff.sqrt()
        };
        let n1 = norm_at(0.01);
        let n2 = norm_at(0.02);
        let expected_1 = 0.01 * sumsq * (30f64).sqrt();
        assert!((n1 - expected_1).abs() / expected_1 < 1e-9, "{n1} vs {expected_1}");
        assert!((n2 / n1 - 2.0).abs() < 1e-9);
    }
}
