//! Supervised feature discovery on the reduced inputs, the LF feature matrix
//! `z_LF = [y_LF, γ₁ … γ_nγ]`, and space-filling training-point selection in the
//! extended feature space `γ⁺`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dimreduce::{ReducedColumn, ReducedInputMatrix};
use crate::error::{usage, Result};
use crate::inputs::SampleMatrix;

/// Recommended number of informative features in `z_LF`.
pub const DEFAULT_N_GAMMA: usize = 2;
/// Recommended width of the extended selection space.
pub const DEFAULT_N_GAMMA_PLUS: usize = 5;

/// `r = |X̂*ᵀ Y_LF|` and the induced column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub scores: Vec<f64>,
    /// Column indices by descending score; ties go to the lower index and
    /// zero-variance columns come last.
    pub order: Vec<usize>,
    /// Columns that may be selected (non-constant).
    pub eligible: Vec<bool>,
}

pub fn rank_features(reduced: &ReducedInputMatrix, y_lf: &[f64], standardize_y: bool) -> Result<FeatureRanking> {
    let n = reduced.n_rows();
    if y_lf.len() != n {
        return Err(usage!("y_LF has {} entries, reduced inputs have {n} rows", y_lf.len()));
    }
    let y: Vec<f64> = if standardize_y {
        let nf = n as f64;
        let m = y_lf.iter().sum::<f64>() / nf;
        let s = (y_lf.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf).sqrt();
        if s > 0.0 {
            y_lf.iter().map(|v| (v - m) / s).collect()
        } else {
            vec![0.0; n]
        }
    } else {
        y_lf.to_vec()
    };
    let eligible: Vec<bool> = reduced.scalers.iter().map(|s| !s.constant).collect();
    let scores: Vec<f64> = reduced
        .data
        .column_iter()
        .zip(&eligible)
        .map(|(c, &ok)| if ok { c.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().abs() } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        eligible[b]
            .cmp(&eligible[a])
            .then(scores[b].total_cmp(&scores[a]))
            .then(a.cmp(&b))
    });
    Ok(FeatureRanking { scores, order, eligible })
}

/// LF features for every Monte Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    /// `N × (1 + n_γ)`; column 0 is the raw `y_LF`.
    pub z_matrix: DMatrix<f64>,
    /// `N × n_γ⁺` standardized selection coordinates.
    pub gamma_plus: DMatrix<f64>,
    /// Reduced-input column behind each `γ⁺` coordinate; the first `n_γ` are
    /// the informative features in `z_LF`.
    pub selected_cols: Vec<usize>,
    pub provenance: Vec<ReducedColumn>,
    pub n_gamma: usize,
    pub n_gamma_plus: usize,
}

pub fn build_feature_space(
    ranking: &FeatureRanking,
    reduced: &ReducedInputMatrix,
    y_lf: &[f64],
    n_gamma: usize,
    n_gamma_plus: usize,
) -> Result<FeatureSpace> {
    let n = reduced.n_rows();
    if y_lf.len() != n {
        return Err(usage!("y_LF has {} entries, reduced inputs have {n} rows", y_lf.len()));
    }
    if n_gamma > n_gamma_plus {
        return Err(usage!("n_gamma ({n_gamma}) exceeds n_gamma_plus ({n_gamma_plus})"));
    }
    let available = ranking.eligible.iter().filter(|&&e| e).count();
    if n_gamma_plus > available {
        return Err(usage!(
            "n_gamma_plus = {n_gamma_plus} but only {available} non-constant reduced columns exist"
        ));
    }
    let selected_cols: Vec<usize> = ranking.order[..n_gamma_plus].to_vec();
    let gamma_plus = reduced.data.select_columns(&selected_cols);
    let mut z_matrix = DMatrix::zeros(n, 1 + n_gamma);
    z_matrix.column_mut(0).copy_from_slice(y_lf);
    for k in 0..n_gamma {
        z_matrix.set_column(1 + k, &gamma_plus.column(k));
    }
    let provenance = selected_cols.iter().map(|&c| reduced.columns[c].clone()).collect();
    Ok(FeatureSpace {
        z_matrix,
        gamma_plus,
        selected_cols,
        provenance,
        n_gamma,
        n_gamma_plus,
    })
}

/// Greedy max-min (farthest-point) subset. Starts at the row nearest the
/// coordinate-wise median, then repeatedly adds the row farthest from the
/// chosen set. Ties go to the lower row index, so a smaller selection is
/// always a prefix of a larger one.
pub fn select_diverse_subset(points: &DMatrix<f64>, n_train: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if n_train > n {
        return Err(usage!("cannot select {n_train} points out of {n}"));
    }
    if n_train == 0 {
        return Ok(vec![]);
    }
    let median: Vec<f64> = points
        .column_iter()
        .map(|c| {
            let mut v: Vec<f64> = c.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m % 2 == 1 {
                v[m / 2]
            } else {
                0.5 * (v[m / 2 - 1] + v[m / 2])
            }
        })
        .collect();
    let sq_dist = |r: usize, target: &[f64]| -> f64 {
        points.row(r).iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let first = argmax_by(n, |r| -sq_dist(r, &median));

    let mut chosen = Vec::with_capacity(n_train);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut next = first;
    loop {
        chosen.push(next);
        taken[next] = true;
        if chosen.len() == n_train {
            break;
        }
        let p: Vec<f64> = points.row(next).iter().copied().collect();
        for r in 0..n {
            if !taken[r] {
                let d = sq_dist(r, &p);
                if d < min_d[r] {
                    min_d[r] = d;
                }
            }
        }
        next = argmax_by(n, |r| if taken[r] { f64::NEG_INFINITY } else { min_d[r] });
    }
    Ok(chosen)
}

fn argmax_by(n: usize, f: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for r in 0..n {
        let v = f(r);
        if v > best_v {
            best = r;
            best_v = v;
        }
    }
    best
}

/// HF training data `D_f = {Z_LF, Y_HF}` together with the raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: DMatrix<f64>,
    pub z_lf: DMatrix<f64>,
    pub y_hf: Vec<f64>,
    pub indices: Vec<usize>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Gathers the selected rows consistently. `y_hf[k]` belongs to `indices[k]`.
pub fn assemble_training_set(
    samples: &SampleMatrix,
    features: &FeatureSpace,
    indices: &[usize],
    y_hf: &[f64],
) -> Result<TrainingSet> {
    let n = samples.n_samples();
    if features.z_matrix.nrows() != n {
        return Err(usage!("feature space has {} rows, samples have {n}", features.z_matrix.nrows()));
    }
    if y_hf.len() != indices.len() {
        return Err(usage!("{} HF values supplied for {} selected inputs", y_hf.len(), indices.len()));
    }
    for (k, &i) in indices.iter().enumerate() {
        if i >= n {
            return Err(usage!("training index {i} out of range (N = {n})"));
        }
        if indices[..k].contains(&i) {
            return Err(usage!("training index {i} selected twice"));
        }
    }
    Ok(TrainingSet {
        x: samples.data.select_rows(indices),
        z_lf: features.z_matrix.select_rows(indices),
        y_hf: y_hf.to_vec(),
        indices: indices.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimreduce::{standardize, Scaler};

    fn reduced_from(cols: &[Vec<f64>]) -> ReducedInputMatrix {
        let n = cols[0].len();
        let raw = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
        let (data, scalers) = standardize(&raw).unwrap();
        ReducedInputMatrix {
            data,
            scalers,
            columns: (0..cols.len())
                .map(|i| ReducedColumn { block: format!("x{i}"), index: 0 })
                .collect(),
        }
    }

    #[test]
    fn perfect_correlation_scores_n() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 1.91).cos()).collect();
        let red = reduced_from(&[b, a]);
        let y: Vec<f64> = red.data.column(1).iter().copied().collect();
        let r = rank_features(&red, &y, false).unwrap();
        assert!((r.scores[1] - 50.0).abs() < 1e-9);
        assert_eq!(r.order[0], 1);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        let red = reduced_from(&[vec![1.0, 2.0, 3.0]]);
        assert_eq!(rank_features(&red, &[1.0], true).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn no_gamma_leaves_only_y_lf() {
        let red = reduced_from(&[vec![1.0, 2.0, 4.0], vec![3.0, 1.0, 0.0]]);
        let y = [0.5, 0.7, 0.9];
        let r = rank_features(&red, &y, true).unwrap();
        let fs = build_feature_space(&r, &red, &y, 0, 2).unwrap();
        assert_eq!(fs.z_matrix.ncols(), 1);
        assert_eq!(fs.z_matrix.column(0).as_slice(), &y);
        assert_eq!(fs.gamma_plus.ncols(), 2);
        assert!(build_feature_space(&r, &red, &y, 0, 3).is_err());
        assert!(build_feature_space(&r, &red, &y, 2, 1).is_err());
    }

    #[test]
    fn ties_break_to_lower_index() {
        let c = vec![1.0, -1.0, 2.0, 0.0];
        let red = reduced_from(&[c.clone(), c.clone(), c]);
        let y = [1.0, 0.0, 3.0, -1.0];
        let r = rank_features(&red, &y, true).unwrap();
        assert_eq!(r.order, vec![0, 1, 2]);
        let fs = build_feature_space(&r, &red, &y, 1, 2).unwrap();
        assert_eq!(fs.selected_cols, vec![0, 1]);
    }

    #[test]
    fn constant_columns_are_never_selected() {
        let red = ReducedInputMatrix {
            data: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]),
            scalers: vec![
                Scaler { mean: 3.0, std: 1.0, constant: true },
                Scaler { mean: 0.0, std: 1.0, constant: false },
            ],
            columns: vec![
                ReducedColumn { block: "c".into(), index: 0 },
                ReducedColumn { block: "v".into(), index: 0 },
            ],
        };
        let r = rank_features(&red, &[1.0, 2.0], false).unwrap();
        assert_eq!(r.order, vec![1, 0]);
        assert!(build_feature_space(&r, &red, &[1.0, 2.0], 1, 2).is_err());
    }

    #[test]
    fn subset_selects_everything_when_asked() {
        let p = DMatrix::from_fn(7, 2, |r, c| (r * 3 + c) as f64);
        let mut s = select_diverse_subset(&p, 7).unwrap();
        s.sort();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
        assert!(select_diverse_subset(&p, 8).is_err());
    }

    #[test]
    fn one_dimensional_example() {
        let p = DMatrix::from_column_slice(3, 1, &[0.0, 0.1, 1.0]);
        let s = select_diverse_subset(&p, 2).unwrap();
        // median is 0.1 → start there, then the far end
        assert_eq!(s, vec![1, 2]);
        assert!((p[(s[0], 0)] - p[(s[1], 0)]).abs() >= 0.9);
    }

    #[test]
    fn training_set_gathers_rows() {
        let samples = SampleMatrix {
            data: DMatrix::from_row_slice(1, 2, &[0.3, 0.4]),
            layout: vec![],
            seed: 0,
        };
        let fs = FeatureSpace {
            z_matrix: DMatrix::from_row_slice(1, 1, &[2.0]),
            gamma_plus: DMatrix::zeros(1, 0),
            selected_cols: vec![],
            provenance: vec![],
            n_gamma: 0,
            n_gamma_plus: 0,
        };
        let t = assemble_training_set(&samples, &fs, &[0], &[5.0]).unwrap();
        assert_eq!(t.x.row(0).iter().copied().collect::<Vec<_>>(), vec![0.3, 0.4]);
        assert_eq!(t.z_lf[(0, 0)], 2.0);
        assert_eq!(t.y_hf, vec![5.0]);
        assert!(assemble_training_set(&samples, &fs, &[0], &[]).is_err());
        assert!(assemble_training_set(&samples, &fs, &[1], &[1.0]).is_err());
    }
}
