use equinv::pca::pca_project;
use equinv::rng;
use ndarray::Array2;
use rand::Rng;

#[test]
fn explained_share_matches_eigen_oracle() {
    let mut r = rng::derive_rng(17, &[1]);
    for (n, d) in [(30usize, 6usize), (50, 12), (25, 4)] {
        let mut rows = Array2::zeros((n, d));
        for i in 0..n {
            let a: f64 = r.random_range(-2.0..2.0);
            let b: f64 = r.random_range(-1.0..1.0);
            for j in 0..d {
                rows[[i, j]] = a * ((j + 1) as f64).sin()
                    + b * ((j * 3 + 1) as f64).cos()
                    + 0.05 * r.random_range(-1.0..1.0);
            }
        }
        let (_, shares) = pca_project(&rows.view(), 2).unwrap();
        let oracle = equinv_oracles::eigen::top_k_variance_share(&rows, 2);
        let got = shares[0] + shares[1];
        assert!(
            (got - oracle).abs() < 1e-6,
            "n={n} d={d}: jacobi {got} vs power-iteration {oracle}"
        );
        assert!(got >= oracle - 1e-6, "projection must capture the top-2 share");
    }
}
