//! Principal component projection for embedding exports. The covariance is
//! eigendecomposed with cyclic Jacobi sweeps, which is exact enough at the
//! embedding widths used here and keeps the export deterministic.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};

/// Centers the rows, projects onto the top `k` principal axes, and reports
/// each axis' share of the total variance. Rows of the projection follow the
/// input order; axis signs are fixed so the largest-magnitude loading is
/// positive.
pub fn pca_project(rows: &ArrayView2<'_, f64>, k: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let (n, d) = rows.dim();
    if k == 0 || k > d {
        return Err(Error::argument(format!("k must be in 1..={d}, got {k}")));
    }
    if n == 0 {
        return Ok((Array2::zeros((0, k)), vec![0.0; k]));
    }
    let mean = rows.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = rows.to_owned() - &mean.insert_axis(ndarray::Axis(0));
    if n == 1 {
        return Ok((Array2::zeros((1, k)), vec![0.0; k]));
    }
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);

    let (eigvals, eigvecs) = jacobi_eigh(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());

    let trace: f64 = eigvals.iter().sum();
    let mut axes = Array2::zeros((d, k));
    let mut shares = vec![0.0; k];
    for (j, &idx) in order.iter().take(k).enumerate() {
        let mut col = eigvecs.column(idx).to_owned();
        let lead = col
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap_or(1.0);
        if lead < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        axes.column_mut(j).assign(&col);
        shares[j] = if trace > 0.0 { eigvals[idx].max(0.0) / trace } else { 0.0 };
    }
    Ok((centered.dot(&axes), shares))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = a.nrows();
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(d);
    for _ in 0..64 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let (mip, miq) = (m[[i, p]], m[[i, q]]);
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for i in 0..d {
                    let (mpi, mqi) = (m[[p, i]], m[[q, i]]);
                    m[[p, i]] = c * mpi - s * mqi;
                    m[[q, i]] = s * mpi + c * mqi;
                }
                for i in 0..d {
                    let (vip, viq) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let eigvals = Array1::from_iter((0..d).map(|i| m[[i, i]]));
    (eigvals, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    fn variance(col: &[f64]) -> f64 {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn rank_one_data_is_fully_explained() {
        let base = [1.0, -2.0, 0.5];
        let mut rows = Array2::zeros((8, 3));
        for i in 0..8 {
            for j in 0..3 {
                rows[[i, j]] = base[j] * i as f64;
            }
        }
        let (proj, shares) = pca_project(&rows.view(), 2).unwrap();
        assert!((shares[0] - 1.0).abs() < 1e-12);
        assert!(shares[1].abs() < 1e-12);
        let total: f64 = (0..3).map(|j| variance(&rows.column(j).to_vec())).sum();
        let pc0 = variance(&proj.column(0).to_vec());
        assert!((pc0 - total).abs() < 1e-9);
    }

    #[test]
    fn projection_variance_matches_reported_share() {
        let mut r = rng::derive_rng(5, &[42]);
        let mut rows = Array2::zeros((40, 6));
        for i in 0..40 {
            let a: f64 = r.random_range(-1.0..1.0);
            let b: f64 = r.random_range(-1.0..1.0);
            for j in 0..6 {
                rows[[i, j]] = a * (j as f64 + 1.0) + b * ((j * j) as f64 * 0.1)
                    + 0.01 * r.random_range(-1.0..1.0);
            }
        }
        let (proj, shares) = pca_project(&rows.view(), 2).unwrap();
        let total: f64 = (0..6).map(|j| variance(&rows.column(j).to_vec())).sum();
        let got: f64 = (0..2).map(|j| variance(&proj.column(j).to_vec())).sum();
        assert!((got / total - (shares[0] + shares[1])).abs() < 1e-9);
        assert!(shares[0] + shares[1] > 0.99, "two factors dominate");
    }

    #[test]
    fn centered_projection_and_bounds() {
        let rows = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let (proj, shares) = pca_project(&rows.view(), 1).unwrap();
        let mean: f64 = proj.column(0).sum() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!(shares[0] <= 1.0 + 1e-12);
        assert!(pca_project(&rows.view(), 3).is_err());
        let empty = Array2::<f64>::zeros((0, 4));
        let (p, s) = pca_project(&empty.view(), 2).unwrap();
        assert_eq!(p.dim(), (0, 2));
        assert_eq!(s, vec![0.0, 0.0]);
    }
}
