//! Unsupervised reduction of the input matrix: truncated Karhunen–Loève
//! expansion of every field block followed by per-column standardization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{numeric, usage, Result};
use crate::inputs::{field_covariance, BlockKind, BlockSpec, RandomFieldSpec, SampleMatrix};

/// Default retained-variance fraction.
pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Truncated eigen-basis of one field covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KleBasis {
    /// All eigenvalues, descending, negatives clamped to zero.
    pub eigenvalues: Vec<f64>,
    /// Retained eigenvectors, `n_pts × n_trunc`, orthonormal columns.
    pub vectors: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub n_trunc: usize,
    pub explained: f64,
}

/// Where a KLE gets its covariance from.
pub enum CovarianceSource<'a> {
    /// Known field covariance `K*` plus the field mean.
    Known { covariance: &'a DMatrix<f64>, mean: &'a [f64] },
    /// Empirical (1/N) covariance of `N × n_pts` realizations.
    Samples(&'a DMatrix<f64>),
}

impl KleBasis {
    pub fn n_points(&self) -> usize {
        self.mean.len()
    }

    /// Retained variance fraction after `m` modes.
    pub fn explained_at(&self, m: usize) -> f64 {
        explained_fraction(&self.eigenvalues, m)
    }

    /// `c = V_truncᵀ (x − m)` per row.
    pub fn project(&self, field_rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        kle_project(self, field_rows)
    }

    /// `m + V_trunc c` per row.
    pub fn reconstruct(&self, coefficients: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if coefficients.ncols() != self.n_trunc {
            return Err(usage!(
                "coefficient matrix has {} columns, basis keeps {} modes",
                coefficients.ncols(),
                self.n_trunc
            ));
        }
        let mut out = coefficients * self.vectors.transpose();
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }
}

fn explained_fraction(eigenvalues: &[f64], m: usize) -> f64 {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    (eigenvalues.iter().take(m).sum::<f64>() / total).clamp(0.0, 1.0)
}

/// Eigen-decomposes the covariance and keeps the smallest order reaching
/// `threshold` of the variance, capped at `max_order`.
pub fn kle_fit(source: CovarianceSource<'_>, threshold: f64, max_order: Option<usize>) -> Result<KleBasis> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(usage!("KLE threshold must lie in (0, 1], got {threshold}"));
    }
    let (cov, mean) = match source {
        CovarianceSource::Known { covariance, mean } => {
            if covariance.nrows() != covariance.ncols() || covariance.nrows() != mean.len() {
                return Err(usage!("covariance and mean dimensions disagree"));
            }
            let asym = (covariance - covariance.transpose()).abs().max();
            if asym > 1e-12 * covariance.abs().max().max(f64::MIN_POSITIVE) {
                return Err(usage!("covariance matrix is not symmetric"));
            }
            (covariance.clone(), mean.to_vec())
        }
        CovarianceSource::Samples(rows) => {
            if rows.nrows() < 2 {
                return Err(usage!("empirical KLE needs at least 2 realizations"));
            }
            empirical_covariance(rows)
        }
    };
    let n = cov.nrows();
    if n == 0 {
        return Err(usage!("empty covariance"));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(numeric!("covariance has non-finite entries"));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|&i| {
            let l = eig.eigenvalues[i];
            if l < -1e-10 * lambda_max {
                log::warn!("covariance eigenvalue {l:e} below tolerance; clamped to zero");
            }
            l.max(0.0)
        })
        .collect();

    let cap = max_order.unwrap_or(n).clamp(1, n);
    let total: f64 = eigenvalues.iter().sum();
    let mut n_trunc = n;
    if total > 0.0 {
        let mut acc = 0.0;
        for (m, l) in eigenvalues.iter().enumerate() {
            acc += l;
            if acc / total >= threshold * (1.0 - 1e-12) {
                n_trunc = m + 1;
                break;
            }
        }
    } else {
        n_trunc = 1;
    }
    let n_trunc = n_trunc.min(cap);

    let mut vectors = DMatrix::zeros(n, n_trunc);
    for (c, &i) in order.iter().take(n_trunc).enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().fold(0.0_f64, |p, &x| if x.abs() > p.abs() { x } else { p });
        if pivot < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(c, &v);
    }
    let explained = explained_fraction(&eigenvalues, n_trunc);
    Ok(KleBasis {
        eigenvalues,
        vectors,
        mean,
        n_trunc,
        explained,
    })
}

fn empirical_covariance(rows: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = rows.nrows() as f64;
    let mean: Vec<f64> = rows.column_iter().map(|c| c.sum() / n).collect();
    let mut centred = rows.clone();
    for mut row in centred.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centred.transpose() * &centred / n;
    let cov = (&cov + cov.transpose()) * 0.5;
    (cov, mean)
}

/// KLE coefficients of every row.
pub fn kle_project(basis: &KleBasis, field_rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if field_rows.ncols() != basis.n_points() {
        return Err(usage!(
            "field rows have {} columns, basis expects {}",
            field_rows.ncols(),
            basis.n_points()
        ));
    }
    let mut centred = field_rows.clone();
    for mut row in centred.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&basis.mean) {
            *v -= m;
        }
    }
    Ok(centred * &basis.vectors)
}

/// Affine map of one column onto zero mean and unit (population) std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
    /// Zero-variance column: mapped to 0, never selectable as a feature.
    pub constant: bool,
}

impl Scaler {
    pub fn apply(&self, x: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }
}

/// Provenance of one reduced column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReducedColumn {
    pub block: String,
    /// KLE mode index for field blocks, 0 for scalars.
    pub index: usize,
}

impl std::fmt::Display for ReducedColumn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.block, self.index)
    }
}

/// Standardized reduced inputs `X̂*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedInputMatrix {
    pub data: DMatrix<f64>,
    pub scalers: Vec<Scaler>,
    pub columns: Vec<ReducedColumn>,
}

impl ReducedInputMatrix {
    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.data.ncols()
    }
}

fn column_scaler(col: impl Iterator<Item = f64> + Clone, n: usize) -> Scaler {
    let nf = n as f64;
    let mean = col.clone().sum::<f64>() / nf;
    let var = col.map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        Scaler { mean, std: 1.0, constant: true }
    } else {
        Scaler { mean, std, constant: false }
    }
}

/// Per-column standardization with stored scalers; constant columns map to 0.
pub fn standardize(matrix: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<Scaler>)> {
    let n = matrix.nrows();
    if n < 2 {
        return Err(usage!("standardization needs at least 2 rows, got {n}"));
    }
    let scalers: Vec<Scaler> = matrix
        .column_iter()
        .map(|c| column_scaler(c.iter().copied(), n))
        .collect();
    let mut out = matrix.clone();
    for (mut col, s) in out.column_iter_mut().zip(&scalers) {
        for v in col.iter_mut() {
            *v = s.apply(*v);
        }
    }
    Ok((out, scalers))
}

/// Reduction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KleSettings {
    pub threshold: f64,
    pub max_order: Option<usize>,
}

impl Default for KleSettings {
    fn default() -> Self {
        KleSettings {
            threshold: DEFAULT_THRESHOLD,
            max_order: None,
        }
    }
}

/// Fitted reduction: one KLE basis per field block, plus the column scalers.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub bases: Vec<(String, KleBasis)>,
    pub reduced: ReducedInputMatrix,
}

/// Builds `X̂* = S[x_uncorr, c_1, …]`. Field blocks use their known covariance
/// when the block spec is given, the empirical one otherwise.
pub fn reduce_inputs(samples: &SampleMatrix, specs: &[BlockSpec], settings: KleSettings) -> Result<Reduction> {
    samples.check_layout()?;
    let known = |name: &str| -> Option<&RandomFieldSpec> {
        specs.iter().find_map(|b| match b {
            BlockSpec::Field { name: n, field } if n == name => Some(field),
            _ => None,
        })
    };

    let mut parts: Vec<DMatrix<f64>> = Vec::new();
    let mut columns = Vec::new();
    for b in samples.layout.iter().filter(|b| b.kind == BlockKind::Uncorrelated) {
        parts.push(samples.block_data(b));
        columns.push(ReducedColumn { block: b.name.clone(), index: 0 });
    }
    let mut bases = Vec::new();
    for b in &samples.layout {
        if let BlockKind::Field { n_pts } = b.kind {
            let rows = samples.block_data(b);
            let basis = match known(&b.name) {
                Some(spec) if spec.n_points() == n_pts => {
                    let cov = field_covariance(spec)?;
                    let mean = spec.mean_vec();
                    kle_fit(CovarianceSource::Known { covariance: &cov, mean: &mean }, settings.threshold, settings.max_order)?
                }
                _ => kle_fit(CovarianceSource::Samples(&rows), settings.threshold, settings.max_order)?,
            };
            parts.push(kle_project(&basis, &rows)?);
            for k in 0..basis.n_trunc {
                columns.push(ReducedColumn { block: b.name.clone(), index: k });
            }
            bases.push((b.name.clone(), basis));
        }
    }

    let n = samples.n_samples();
    let width: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut raw = DMatrix::zeros(n, width);
    let mut at = 0;
    for p in &parts {
        raw.columns_mut(at, p.ncols()).copy_from(p);
        at += p.ncols();
    }
    let (data, scalers) = standardize(&raw)?;
    Ok(Reduction {
        bases,
        reduced: ReducedInputMatrix { data, scalers, columns },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis_of(cov: &DMatrix<f64>, threshold: f64, cap: Option<usize>) -> KleBasis {
        let mean = vec![0.0; cov.nrows()];
        kle_fit(CovarianceSource::Known { covariance: cov, mean: &mean }, threshold, cap).unwrap()
    }

    #[test]
    fn identity_covariance_explains_linearly() {
        let k = DMatrix::<f64>::identity(5, 5);
        let b = basis_of(&k, 1.0, None);
        assert!(b.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-12));
        for j in 0..=5 {
            assert!((b.explained_at(j) - j as f64 / 5.0).abs() < 1e-12);
        }
        assert_eq!(basis_of(&k, 0.6, None).n_trunc, 3);
    }

    #[test]
    fn rank_one_covariance_keeps_one_mode() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let k = &v * v.transpose();
        for t in [0.1, 0.5, 0.95, 1.0] {
            let b = basis_of(&k, t, None);
            assert_eq!(b.n_trunc, 1);
            assert!((b.explained - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_mode_sample_projects_to_unit_coefficient() {
        let spec = RandomFieldSpec::channel_inflow(40);
        let k = field_covariance(&spec).unwrap();
        let mean = spec.mean_vec();
        let b = kle_fit(CovarianceSource::Known { covariance: &k, mean: &mean }, 0.99, None).unwrap();
        let s1 = b.eigenvalues[0].sqrt();
        let row: Vec<f64> = (0..40).map(|i| mean[i] + s1 * b.vectors[(i, 0)]).collect();
        let rows = DMatrix::from_row_slice(2, 40, &[row.clone(), mean.clone()].concat());
        let c = kle_project(&b, &rows).unwrap();
        assert!((c[(0, 0)] - s1).abs() < 1e-12 * s1.max(1.0));
        for j in 1..b.n_trunc {
            assert!(c[(0, j)].abs() < 1e-12);
        }
        assert!(c.row(1).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn standardize_reference_column() {
        let m = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let (s, sc) = standardize(&m).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt(); // population std √(2/3)
        assert!((s[(0, 0)] + expect).abs() < 1e-12);
        assert!(s[(1, 0)].abs() < 1e-15);
        assert!((s[(2, 0)] - expect).abs() < 1e-12);
        assert!((expect - 1.224_744_871_391_589).abs() < 1e-12);
        assert!(!sc[0].constant);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let m = DMatrix::from_column_slice(4, 2, &[0.1, 0.1, 0.1, 0.1, 1.0, 2.0, 3.0, 5.0]);
        let (s, sc) = standardize(&m).unwrap();
        assert!(sc[0].constant);
        assert_eq!(sc[0].std, 1.0);
        assert!(s.column(0).iter().all(|&v| v == 0.0));
        assert!(standardize(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let b = basis_of(&DMatrix::identity(3, 3), 1.0, None);
        assert_eq!(kle_project(&b, &DMatrix::zeros(2, 4)).unwrap_err().exit_code(), 2);
    }
}
