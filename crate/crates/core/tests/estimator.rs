use bmfmc::bmfmc::{density_mean, density_variance_raw, normal_pdf, posterior_statistics, SupportGrid};
use bmfmc::gp::{GaussianProcessModel, KernelParams, MeanMode};
use bmfmc::rng;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn model(seed: u64, noise: f64) -> GaussianProcessModel {
    let mut r = rng::stream(seed, "estimator-test");
    let z = DMatrix::from_fn(12, 2, |_, _| 4.0 * r.random::<f64>() - 2.0);
    let y: Vec<f64> = (0..12).map(|i| z[(i, 0)] + 0.4 * (2.0 * z[(i, 1)]).cos()).collect();
    GaussianProcessModel::condition(KernelParams::isotropic(0.7, 0.4, noise), MeanMode::LfPassthrough, z, y).unwrap()
}

fn test_features(seed: u64, n: usize) -> DMatrix<f64> {
    let mut r = rng::stream(seed, "estimator-features");
    DMatrix::from_fn(n, 2, |_, _| 5.0 * r.random::<f64>() - 2.5)
}

#[test]
fn mean_matches_per_sample_gaussian_sum() {
    let m = model(1, 0.05);
    let z = test_features(2, 1000);
    let g = SupportGrid::equispaced(-5.0, 5.0, 120).unwrap();
    let d = density_mean(&m, &z, &g).unwrap();
    let preds = m.predict(&z).unwrap();
    for (l, &y) in g.points().iter().enumerate() {
        // plain reverse-order sum in a different accumulation order
        let mut s = 0.0;
        for p in preds.iter().rev() {
            s += normal_pdf(y, p.mean, p.variance + p.noise);
        }
        let oracle = s / preds.len() as f64;
        assert!((d[l] - oracle).abs() <= 1e-12, "{l}: {} vs {oracle}", d[l]);
    }
}

#[test]
fn variance_nonnegative_and_integral_near_one() {
    let m = model(3, 0.02);
    let z = test_features(4, 300);
    let g = SupportGrid::equispaced(-9.0, 9.0, 400).unwrap();
    let p = posterior_statistics(&m, &z, &g, 300).unwrap();
    assert!(p.variance_floor >= -1e-8);
    assert!(p.variance.iter().all(|v| *v >= 0.0));
    assert!((g.integrate(&p.mean) - 1.0).abs() < 1e-3);
    let (lo, hi) = p.credible_band();
    for l in 0..g.len() {
        assert!(lo[l] >= 0.0 && lo[l] <= p.mean[l] && p.mean[l] <= hi[l]);
    }
}

#[test]
fn variance_subset_uses_its_own_mean() {
    let m = model(5, 0.05);
    let z = test_features(6, 40);
    let g = SupportGrid::equispaced(-5.0, 5.0, 60).unwrap();
    let p = posterior_statistics(&m, &z, &g, 10).unwrap();
    assert_eq!(p.n_used_mean, 40);
    assert_eq!(p.n_used_var, 10);
    let rows: Vec<usize> = (0..10).map(|k| k * 4).collect();
    let zs = z.select_rows(&rows);
    let ms = density_mean(&m, &zs, &g).unwrap();
    let raw = density_variance_raw(&m, &zs, &g, &ms).unwrap();
    for l in 0..g.len() {
        assert_eq!(p.variance[l], raw[l].max(0.0));
    }
}

#[test]
fn perfectly_correlated_pair_is_one_component() {
    // a prior GP with an enormous length scale makes f(z1) and f(z2) identical
    let p = KernelParams::isotropic(1e6, 0.3, 0.1);
    let m = GaussianProcessModel::prior(p, MeanMode::Zero, 1).unwrap();
    let g = SupportGrid::equispaced(-4.0, 4.0, 81).unwrap();
    let two = DMatrix::from_column_slice(2, 1, &[0.0, 1e-3]);
    let one = DMatrix::from_column_slice(1, 1, &[0.0]);
    let mean2 = density_mean(&m, &two, &g).unwrap();
    let var2 = density_variance_raw(&m, &two, &g, &mean2).unwrap();
    let mean1 = density_mean(&m, &one, &g).unwrap();
    let var1 = density_variance_raw(&m, &one, &g, &mean1).unwrap();
    for l in 0..g.len() {
        assert!((var2[l] - var1[l]).abs() < 1e-6, "{l}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mean_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..30) {
        let m = model(seed, 0.03);
        let z = test_features(seed + 1, 31);
        let perm: Vec<usize> = (0..31).map(|i| (i * 7 + shift) % 31).collect();
        let g = SupportGrid::equispaced(-5.0, 5.0, 50).unwrap();
        let a = density_mean(&m, &z, &g).unwrap();
        let b = density_mean(&m, &z.select_rows(&perm), &g).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn deterministic_gp_gives_zero_variance(seed in 0u64..1000) {
        let p = KernelParams::isotropic(1.0, 1e-300, 0.1 + (seed % 7) as f64 * 0.05);
        let m = GaussianProcessModel::prior(p, MeanMode::LfPassthrough, 2).unwrap();
        let z = test_features(seed, 25);
        let g = SupportGrid::equispaced(-5.0, 5.0, 70).unwrap();
        let mean = density_mean(&m, &z, &g).unwrap();
        let var = density_variance_raw(&m, &z, &g, &mean).unwrap();
        prop_assert!(var.iter().all(|v| v.abs() <= 1e-10));
    }
}
