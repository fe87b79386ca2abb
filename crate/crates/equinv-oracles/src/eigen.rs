//! Power iteration with deflation on symmetric matrices, for checking PCA
//! output against an independent decomposition.

use ndarray::{Array1, Array2};

fn normalize(v: &mut Array1<f64>) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
}

/// Top-k (eigenvalue, eigenvector) pairs of a symmetric PSD matrix,
/// largest first.
pub fn top_eigs(a: &Array2<f64>, k: usize, iters: usize) -> Vec<(f64, Array1<f64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut work = a.clone();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64) * 1e-3);
        normalize(&mut v);
        for _ in 0..iters {
            v = work.dot(&v);
            normalize(&mut v);
        }
        let lambda = v.dot(&work.dot(&v));
        for i in 0..n {
            for j in 0..n {
                work[[i, j]] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

/// Fraction of total variance captured by the top-k eigenvalues of the
/// covariance of `rows` (rows are observations).
pub fn top_k_variance_share(rows: &Array2<f64>, k: usize) -> f64 {
    let n = rows.nrows() as f64;
    let d = rows.ncols();
    let mean = rows.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = rows - &mean.broadcast((rows.nrows(), d)).unwrap();
    let cov = centered.t().dot(&centered) / (n - 1.0).max(1.0);
    let trace: f64 = (0..d).map(|i| cov[[i, i]]).sum();
    if trace <= 0.0 {
        return 1.0;
    }
    let top: f64 = top_eigs(&cov, k, 500).iter().map(|(l, _)| l.max(0.0)).sum();
    (top / trace).min(1.0)
}
