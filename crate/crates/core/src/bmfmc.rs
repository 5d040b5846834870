//! Posterior statistics of the HF output density.
//!
//! Given a fitted GP for `p(y_HF | z_LF)` and `N` LF feature vectors, the
//! density estimate is the mixture `(1/N) Σⱼ N(y; m_D(zⱼ), v_D(zⱼ) + σn²)`.
//! Its pointwise variance under the GP posterior is the double sum of
//! bivariate normal densities evaluated on the diagonal `[y, y]`, minus the
//! squared mean.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::gp::{GaussianProcessModel, PredictiveGaussian};
use crate::linalg::{canonical_sum, pairwise_sum};
use crate::par;

pub const DEFAULT_SUPPORT_POINTS: usize = 200;
pub const DEFAULT_SUPPORT_PAD: f64 = 0.15;
pub const DEFAULT_N_VARIANCE: usize = 500;
const RHO_LIMIT: f64 = 1.0 - 1e-12;

/// Strictly increasing evaluation points for the density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SupportGrid {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for SupportGrid {
    type Error = crate::Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        SupportGrid::new(points)
    }
}

impl From<SupportGrid> for Vec<f64> {
    fn from(g: SupportGrid) -> Vec<f64> {
        g.points
    }
}

impl SupportGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(usage!("support grid needs at least 2 points"));
        }
        if points.iter().any(|p| !p.is_finite()) || points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(usage!("support grid must be finite and strictly increasing"));
        }
        Ok(SupportGrid { points })
    }

    pub fn equispaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(usage!("equispaced support needs lo < hi and n >= 2, got [{lo}, {hi}] with {n}"));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut pts: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        pts[n - 1] = hi;
        SupportGrid::new(pts)
    }

    /// `n` points over `[min − pad·range, max + pad·range]` of `values`.
    pub fn covering(values: &[f64], n: usize, pad: f64) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return Err(usage!("cannot build a support grid from no finite values"));
        }
        let mut range = hi - lo;
        if range == 0.0 {
            range = lo.abs().max(1.0);
        }
        SupportGrid::equispaced(lo - pad * range, hi + pad * range, n)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Trapezoid weights: `∫ f ≈ Σ wₗ f(yₗ)`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let p = &self.points;
        let s = p.len();
        (0..s)
            .map(|l| {
                let left = if l > 0 { p[l] - p[l - 1] } else { 0.0 };
                let right = if l + 1 < s { p[l + 1] - p[l] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        let terms: Vec<f64> = self.trapezoid_weights().iter().zip(f).map(|(w, v)| w * v).collect();
        pairwise_sum(&terms)
    }

    /// Index of the cell `[yₗ, yₗ₊₁]` containing `y`, clamped to the edge cells.
    fn cell(&self, y: f64) -> usize {
        let p = &self.points;
        let k = p.partition_point(|&v| v <= y);
        k.saturating_sub(1).min(p.len() - 2)
    }

    fn cell_width(&self, y: f64) -> f64 {
        let c = self.cell(y);
        self.points[c + 1] - self.points[c]
    }
}

/// One mixture component `N(y; mean, var)` as seen on a particular grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Component {
    Gaussian { mean: f64, var: f64 },
    /// Zero variance: a unit-mass hat on the two neighbouring grid points.
    Hat { mean: f64 },
}

impl Component {
    /// Components narrower than the local grid spacing are widened to it so
    /// the trapezoid rule still sees unit mass.
    pub fn on_grid(mean: f64, var: f64, support: &SupportGrid) -> Self {
        if var > 0.0 {
            let w = support.cell_width(mean);
            Component::Gaussian { mean, var: var.max(w * w) }
        } else {
            Component::Hat { mean }
        }
    }

    /// Values at every support point.
    pub fn evaluate(&self, support: &SupportGrid) -> Vec<f64> {
        let pts = support.points();
        match *self {
            Component::Gaussian { mean, var } => pts.iter().map(|&y| normal_pdf(y, mean, var)).collect(),
            Component::Hat { mean } => {
                let mut out = vec![0.0; pts.len()];
                let s = pts.len();
                if mean < pts[0] || mean > pts[s - 1] {
                    return out;
                }
                let c = support.cell(mean);
                let w = support.trapezoid_weights();
                let width = pts[c + 1] - pts[c];
                let right = (mean - pts[c]) / width;
                out[c] = (1.0 - right) / w[c];
                out[c + 1] = right / w[c + 1];
                out
            }
        }
    }
}

pub fn normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    (-0.5 * d * d / var).exp() / (2.0 * PI * var).sqrt()
}

/// Bivariate normal density at the diagonal point `[y, y]`.
pub fn bivariate_diag_pdf(y: f64, mi: f64, mj: f64, vi: f64, vj: f64, cov: f64) -> f64 {
    let (si, sj) = (vi.sqrt(), vj.sqrt());
    let rho = clamp_rho(cov / (si * sj));
    let (ui, uj) = ((y - mi) / si, (y - mj) / sj);
    let one_m = 1.0 - rho * rho;
    let q = (ui * ui - 2.0 * rho * ui * uj + uj * uj) / one_m;
    (-0.5 * q).exp() / (2.0 * PI * si * sj * one_m.sqrt())
}

fn clamp_rho(rho: f64) -> f64 {
    if rho.abs() > 1.0 {
        log::warn!("posterior correlation {rho} outside [-1, 1]; clamped");
    }
    rho.clamp(-RHO_LIMIT, RHO_LIMIT)
}

fn components(preds: &[PredictiveGaussian], support: &SupportGrid) -> Vec<Component> {
    preds
        .iter()
        .map(|p| Component::on_grid(p.mean, p.variance + p.noise, support))
        .collect()
}

/// Mixture average over all rows of `z_star`.
///
/// Each grid value is an order-independent sum of the per-row contributions,
/// so permuting the rows of `z_star` leaves the result bitwise unchanged.
pub fn density_mean(model: &GaussianProcessModel, z_star: &DMatrix<f64>, support: &SupportGrid) -> Result<Vec<f64>> {
    if z_star.nrows() == 0 {
        return Err(usage!("density mean needs at least one test feature"));
    }
    let preds = model.predict(z_star)?;
    Ok(mixture_mean(&components(&preds, support), support))
}

fn mixture_mean(comps: &[Component], support: &SupportGrid) -> Vec<f64> {
    let n = comps.len();
    let values: Vec<Vec<f64>> = par::map(n, |j| comps[j].evaluate(support));
    let inv_n = 1.0 / n as f64;
    par::map(support.len(), |l| {
        let mut col: Vec<f64> = values.iter().map(|v| v[l]).collect();
        canonical_sum(&mut col) * inv_n
    })
}

/// Pointwise variance before clamping. `mean_vec` must be the mixture mean
/// over exactly the rows of `z_star`.
pub fn density_variance_raw(
    model: &GaussianProcessModel,
    z_star: &DMatrix<f64>,
    support: &SupportGrid,
    mean_vec: &[f64],
) -> Result<Vec<f64>> {
    let n = z_star.nrows();
    if n == 0 {
        return Err(usage!("density variance needs at least one test feature"));
    }
    if mean_vec.len() != support.len() {
        return Err(usage!("mean vector has {} entries, support has {}", mean_vec.len(), support.len()));
    }
    let preds = model.predict(z_star)?;
    let cov = model.posterior_cov(z_star, z_star)?;
    let comps = components(&preds, support);
    let evaluated: Vec<Option<Vec<f64>>> = par::map(n, |j| match comps[j] {
        Component::Hat { .. } => Some(comps[j].evaluate(support)),
        Component::Gaussian { .. } => None,
    });
    let pts = support.points();
    let s = pts.len();

    // rows[i][l] = Σⱼ E[pᵢ(yₗ) pⱼ(yₗ)], j in index order
    let rows: Vec<Vec<f64>> = par::map(n, |i| {
        let mut acc = vec![0.0; s];
        let mut term = vec![0.0; n];
        for (l, a) in acc.iter_mut().enumerate() {
            let y = pts[l];
            for (j, t) in term.iter_mut().enumerate() {
                *t = match (comps[i], comps[j]) {
                    (Component::Gaussian { mean: mi, var: vi }, Component::Gaussian { mean: mj, var: vj }) => {
                        bivariate_diag_pdf(y, mi, mj, vi, vj, cov[(i, j)])
                    }
                    _ => {
                        let pi = evaluated[i].as_ref().map_or_else(|| comps[i].point(y), |v| v[l]);
                        let pj = evaluated[j].as_ref().map_or_else(|| comps[j].point(y), |v| v[l]);
                        pi * pj
                    }
                };
            }
            *a = pairwise_sum(&term);
        }
        acc
    });
    let inv_n2 = 1.0 / (n as f64 * n as f64);
    Ok((0..s)
        .map(|l| {
            let col: Vec<f64> = rows.iter().map(|r| r[l]).collect();
            pairwise_sum(&col) * inv_n2 - mean_vec[l] * mean_vec[l]
        })
        .collect())
}

impl Component {
    fn point(&self, y: f64) -> f64 {
        match *self {
            Component::Gaussian { mean, var } => normal_pdf(y, mean, var),
            Component::Hat { .. } => unreachable!("hat components are pre-evaluated on the grid"),
        }
    }
}

/// Pointwise variance of the density estimate, clamped at zero.
pub fn density_variance(
    model: &GaussianProcessModel,
    z_star: &DMatrix<f64>,
    support: &SupportGrid,
    mean_vec: &[f64],
) -> Result<Vec<f64>> {
    Ok(density_variance_raw(model, z_star, support, mean_vec)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect())
}

/// `n_v` row indices spread evenly over `0..n` by a fixed stride.
pub fn stride_subset(n: usize, n_v: usize) -> Vec<usize> {
    let n_v = n_v.min(n);
    (0..n_v).map(|k| k * n / n_v).collect()
}

/// Density mean and variance with credible band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPrediction {
    pub support: SupportGrid,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Smallest variance before clamping at zero.
    pub variance_floor: f64,
    pub n_used_mean: usize,
    pub n_used_var: usize,
}

impl DensityPrediction {
    /// `mean ± 2√variance`, lower edge clamped at 0.
    pub fn credible_band(&self) -> (Vec<f64>, Vec<f64>) {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| {
                let half = 2.0 * v.sqrt();
                ((m - half).max(0.0), m + half)
            })
            .unzip()
    }

    pub fn mode_index(&self) -> usize {
        let mut best = 0;
        for (l, m) in self.mean.iter().enumerate() {
            if *m > self.mean[best] {
                best = l;
            }
        }
        best
    }
}

/// Mean from all rows, variance from a stride subset of at most `n_variance`
/// rows (the variance subtracts the mean over that same subset).
pub fn posterior_statistics(
    model: &GaussianProcessModel,
    z_star: &DMatrix<f64>,
    support: &SupportGrid,
    n_variance: usize,
) -> Result<DensityPrediction> {
    if n_variance == 0 {
        return Err(usage!("n_variance must be positive"));
    }
    let mean = density_mean(model, z_star, support)?;
    let n = z_star.nrows();
    let subset = stride_subset(n, n_variance);
    let (z_v, mean_v) = if subset.len() == n {
        (z_star.clone(), mean.clone())
    } else {
        let z_v = z_star.select_rows(&subset);
        let m = density_mean(model, &z_v, support)?;
        (z_v, m)
    };
    let raw = density_variance_raw(model, &z_v, support, &mean_v)?;
    let variance_floor = raw.iter().copied().fold(f64::INFINITY, f64::min);
    if variance_floor < -1e-8 {
        log::warn!("density variance dipped to {variance_floor:e} before clamping");
    }
    Ok(DensityPrediction {
        support: support.clone(),
        mean,
        variance: raw.into_iter().map(|v| v.max(0.0)).collect(),
        variance_floor,
        n_used_mean: n,
        n_used_var: subset.len(),
    })
}
