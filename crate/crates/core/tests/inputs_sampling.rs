use bmfmc::dimreduce::{kle_fit, CovarianceSource};
use bmfmc::inputs::{
    assemble_samples, field_covariance, sample_field, Amplitude, BlockSpec, FieldGrid, MeanProfile, RandomFieldSpec,
    ScalarDistribution,
};

fn generic_spec() -> RandomFieldSpec {
    RandomFieldSpec {
        grid: FieldGrid::CellCentred { lo: 0.0, hi: 2.0, n: 25 },
        mean: MeanProfile::Constant(1.5),
        amplitude: Amplitude::Constant(0.7),
        length_scale: 0.4,
    }
}

#[test]
fn field_mean_and_covariance_converge() {
    let spec = generic_spec();
    let n = 10_000;
    let draws = sample_field(&spec, n, 21).unwrap();
    let k = field_covariance(&spec).unwrap();
    let mean = spec.mean_vec();
    let amp = spec.amplitude_vec();
    let emp: Vec<f64> = draws.column_iter().map(|c| c.sum() / n as f64).collect();
    for p in 0..mean.len() {
        assert!((emp[p] - mean[p]).abs() <= 5.0 * amp[p] / (n as f64).sqrt());
    }
    let bound = 5.0 * k.max() * (2.0 / n as f64).sqrt();
    for i in 0..k.nrows() {
        for j in 0..=i {
            let c: f64 = (0..n).map(|r| (draws[(r, i)] - emp[i]) * (draws[(r, j)] - emp[j])).sum::<f64>() / n as f64;
            assert!((c - k[(i, j)]).abs() <= bound, "({i},{j})");
        }
    }
}

#[test]
fn covariance_is_symmetric_and_near_psd() {
    for spec in [generic_spec(), RandomFieldSpec::channel_inflow(200), RandomFieldSpec::wall_inflow(120)] {
        let k = field_covariance(&spec).unwrap();
        assert_eq!(k, k.transpose());
        let eig = k.clone().symmetric_eigenvalues();
        let max = eig.max();
        assert!(eig.min() >= -1e-10 * max);
    }
}

#[test]
fn sampling_is_bit_reproducible() {
    let blocks = vec![
        BlockSpec::field("u", RandomFieldSpec::channel_inflow(200)),
        BlockSpec::scalar("a", ScalarDistribution::LogNormal { mu: 6.392, var: 0.00498 }),
        BlockSpec::scalar("b", ScalarDistribution::Uniform { lo: 0.0, hi: 1.0 }),
        BlockSpec::scalar("c", ScalarDistribution::Normal { mean: 0.0, var: 2.0 }),
    ];
    let a = assemble_samples(&blocks, 50, 77).unwrap();
    let b = assemble_samples(&blocks, 50, 77).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), 203);
    assert_ne!(a.data, assemble_samples(&blocks, 50, 78).unwrap().data);
}

#[test]
fn inflow_kle_capped_at_ten_modes() {
    let spec = RandomFieldSpec::channel_inflow(200);
    let k = field_covariance(&spec).unwrap();
    let mean = spec.mean_vec();
    let at_95 = kle_fit(CovarianceSource::Known { covariance: &k, mean: &mean }, 0.95, None).unwrap();
    assert!(at_95.n_trunc < 10 && at_95.explained >= 0.95);
    // a fixed order of ten overrides the variance threshold
    let basis = kle_fit(CovarianceSource::Known { covariance: &k, mean: &mean }, 1.0, Some(10)).unwrap();
    assert_eq!(basis.n_trunc, 10);
    let vtv = basis.vectors.transpose() * &basis.vectors;
    for i in 0..10 {
        for j in 0..10 {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((vtv[(i, j)] - e).abs() < 1e-8);
        }
    }
    for m in 1..200 {
        assert!(basis.explained_at(m) <= basis.explained_at(m + 1));
    }
    assert!((basis.explained_at(200) - 1.0).abs() < 1e-12);
}

#[test]
fn truncated_reconstruction_error_matches_discarded_energy() {
    let spec = generic_spec();
    let k = field_covariance(&spec).unwrap();
    let basis = kle_fit(CovarianceSource::Known { covariance: &k, mean: &spec.mean_vec() }, 0.9, None).unwrap();
    let n = 4000;
    let rows = sample_field(&spec, n, 5).unwrap();
    let back = basis.reconstruct(&basis.project(&rows).unwrap()).unwrap();
    let mse: f64 = (0..n).map(|r| (back.row(r) - rows.row(r)).norm_squared()).sum::<f64>() / n as f64;
    let total: f64 = basis.eigenvalues.iter().sum();
    assert!(mse <= (1.0 - basis.explained) * total * 1.1, "{mse}");
}
