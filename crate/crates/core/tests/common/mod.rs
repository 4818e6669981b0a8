//! Shared oracles for integration tests: central finite differences and a
//! direct one-sided Jacobi SVD. Both stay independent of the library's
//! own differentiation and decomposition paths.

#![allow(dead_code)]

use mapnet::rng::SeedRng;

/// Central finite difference of a scalar function along one coordinate.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error with a floor that keeps near-zero comparisons sane.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Check an analytic gradient against central differences coordinate by
/// coordinate. Returns the worst relative error observed.
pub fn check_gradient(
    f: impl FnMut(&[f64]) -> f64 + Copy,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> f64 {
    let mut worst = 0.0f64;
    for &i in coords {
        let fd = central_diff(f, x, i, h);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

/// A deterministic subset of coordinates for spot checks on larger inputs.
pub fn coord_sample(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedRng::from_seed(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.truncate(count.min(n));
    idx
}

/// Dense one-sided Jacobi SVD of an m x n matrix (m >= 2). Returns
/// singular values (descending) and the right singular vectors as columns
/// of an n x n matrix. Independent oracle for the PCA routes.
pub fn jacobi_svd(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = a.to_vec(); // m x n, columns rotated in place
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..m {
                    let (x, y) = (u[r * n + p], u[r * n + q]);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                off += apq * apq;
                if apq.abs() < 1e-15 * (app * aqq).sqrt().max(1e-300) {
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..m {
                    let (x, y) = (u[r * n + p], u[r * n + q]);
                    u[r * n + p] = c * x - s * y;
                    u[r * n + q] = s * x + c * y;
                }
                for r in 0..n {
                    let (x, y) = (v[r * n + p], v[r * n + q]);
                    v[r * n + p] = c * x - s * y;
                    v[r * n + q] = s * x + c * y;
                }
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
    }
    let mut svals: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let s: f64 = (0..m).map(|r| u[r * n + j] * u[r * n + j]).sum();
            (s.sqrt(), j)
        })
        .collect();
    svals.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut v_sorted = vec![0.0f64; n * n];
    for (dst, &(_, src)) in svals.iter().enumerate() {
        for r in 0..n {
            v_sorted[r * n + dst] = v[r * n + src];
        }
    }
    (svals.into_iter().map(|(s, _)| s).collect(), v_sorted)
}
