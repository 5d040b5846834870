//! Gaussian-process regression of `y_HF` on the LF features `z_LF`.
//!
//! Squared-exponential prior `k(z, z') = σ0²·exp(−|z − z'|²/(2ℓ²))` with a
//! homoscedastic Gaussian likelihood of variance `σn²`. Hyperparameters are
//! point estimates maximizing the log marginal likelihood, optimized in
//! log-space with multiple restarts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{numeric, usage, Result};
use crate::linalg::{self, Factor};
use crate::optim;
use crate::rng;

/// Kernel hyperparameters `θ = {ℓ, σ0², σn²}`.
///
/// `length_scales` has one entry for the isotropic kernel, or one per feature
/// dimension when per-dimension scales are enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl KernelParams {
    pub fn isotropic(length_scale: f64, signal_var: f64, noise_var: f64) -> Self {
        KernelParams {
            length_scales: vec![length_scale],
            signal_var,
            noise_var,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.length_scales.is_empty() || (self.length_scales.len() != 1 && self.length_scales.len() != dim) {
            return Err(usage!(
                "{} length scales for {dim}-dimensional features",
                self.length_scales.len()
            ));
        }
        if self.length_scales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(usage!("length scales must be positive"));
        }
        if !(self.signal_var.is_finite() && self.signal_var > 0.0) {
            return Err(usage!("signal variance must be positive"));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(usage!("noise variance must be non-negative"));
        }
        Ok(())
    }

    /// `[ln ℓ…, ln σ0², ln σn²]`
    pub fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.length_scales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_var.ln());
        v.push(self.noise_var.ln());
        v
    }

    pub fn from_log(v: &[f64]) -> Self {
        let k = v.len() - 2;
        KernelParams {
            length_scales: v[..k].iter().map(|x| x.exp()).collect(),
            signal_var: v[k].exp(),
            noise_var: v[k + 1].exp(),
        }
    }

    fn inv_sq_scale(&self, d: usize) -> f64 {
        let l = if self.length_scales.len() == 1 {
            self.length_scales[0]
        } else {
            self.length_scales[d]
        };
        1.0 / (l * l)
    }
}

/// Prior mean function `m(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MeanMode {
    Zero,
    /// `m(z) = z[0]`, the raw LF output.
    #[default]
    LfPassthrough,
}

impl MeanMode {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            MeanMode::Zero => 0.0,
            MeanMode::LfPassthrough => z.first().copied().unwrap_or(0.0),
        }
    }

    fn residuals(&self, z: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            y.len(),
            y.iter().enumerate().map(|(i, yi)| match self {
                MeanMode::Zero => *yi,
                MeanMode::LfPassthrough => yi - z[(i, 0)],
            }),
        )
    }
}

fn sq_dist_scaled(params: &KernelParams, a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..a.ncols() {
        let diff = a[(i, d)] - b[(j, d)];
        s += diff * diff * params.inv_sq_scale(d);
    }
    s
}

/// Squared-exponential cross-covariance, `n × p`.
pub fn kernel_eval(params: &KernelParams, za: &DMatrix<f64>, zb: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(za.ncols(), zb.ncols(), "feature dimensions differ");
    DMatrix::from_fn(za.nrows(), zb.nrows(), |i, j| {
        params.signal_var * (-0.5 * sq_dist_scaled(params, za, i, zb, j)).exp()
    })
}

fn check_data(z: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if z.nrows() != y.len() {
        return Err(usage!("{} feature rows but {} targets", z.nrows(), y.len()));
    }
    if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(usage!("training data contains non-finite values"));
    }
    Ok(())
}

fn noisy_gram(params: &KernelParams, z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut k = kernel_eval(params, z, z);
    for i in 0..k.nrows() {
        k[(i, i)] += params.noise_var;
    }
    k
}

/// `−½ rᵀ(K + σn²I)⁻¹r − ½ log det(K + σn²I) − (n/2) log 2π`, `r = Y − m(Z)`.
/// No jitter: a singular system is a numeric error.
pub fn log_marginal_likelihood(params: &KernelParams, z: &DMatrix<f64>, y: &[f64], mode: MeanMode) -> Result<f64> {
    Ok(lml_with_grad(params, z, y, mode, false)?.0)
}

/// Log marginal likelihood and its gradient with respect to
/// `[ln ℓ…, ln σ0², ln σn²]`.
pub fn log_marginal_likelihood_grad(
    params: &KernelParams,
    z: &DMatrix<f64>,
    y: &[f64],
    mode: MeanMode,
) -> Result<(f64, Vec<f64>)> {
    let (f, g) = lml_with_grad(params, z, y, mode, true)?;
    Ok((f, g.expect("gradient requested")))
}

fn lml_with_grad(
    params: &KernelParams,
    z: &DMatrix<f64>,
    y: &[f64],
    mode: MeanMode,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_data(z, y)?;
    params.validate(z.ncols())?;
    let n = y.len();
    if n == 0 {
        return Err(usage!("log marginal likelihood needs at least one training point"));
    }
    let r = mode.residuals(z, y);
    let factor = linalg::cholesky(&noisy_gram(params, z), "GP gram matrix K + σn²I")?;
    let alpha = factor.solve_vec(&r);
    let lml = -0.5 * r.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return Err(numeric!("log marginal likelihood is not finite"));
    }
    if !want_grad {
        return Ok((lml, None));
    }

    // W = ααᵀ − K⁻¹; dL/dθ = ½ Σᵢⱼ Wᵢⱼ ∂Kᵢⱼ/∂θ
    let kinv = factor.inverse();
    let w = &alpha * alpha.transpose() - &kinv;
    let n_ls = params.length_scales.len();
    let mut grad = vec![0.0; n_ls + 2];
    for i in 0..n {
        for j in 0..n {
            let wij = w[(i, j)];
            let se;
            if n_ls == 1 {
                let d2 = sq_dist_scaled(params, z, i, z, j);
                se = params.signal_var * (-0.5 * d2).exp();
                grad[0] += 0.5 * wij * se * d2;
            } else {
                let mut parts = vec![0.0; n_ls];
                let mut d2 = 0.0;
                for (d, p) in parts.iter_mut().enumerate() {
                    let diff = z[(i, d)] - z[(j, d)];
                    *p = diff * diff * params.inv_sq_scale(d);
                    d2 += *p;
                }
                se = params.signal_var * (-0.5 * d2).exp();
                for (d, p) in parts.iter().enumerate() {
                    grad[d] += 0.5 * wij * se * p;
                }
            }
            grad[n_ls] += 0.5 * wij * se;
        }
        grad[n_ls + 1] += 0.5 * w[(i, i)] * params.noise_var;
    }
    Ok((lml, Some(grad)))
}

/// Predictive distribution of the latent `f*` at one test input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveGaussian {
    pub mean: f64,
    /// Latent variance `v_D(z*)`, observation noise excluded.
    pub variance: f64,
    pub noise: f64,
}

/// A GP conditioned on training data with fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GaussianProcessModel {
    pub params: KernelParams,
    pub mean_mode: MeanMode,
    pub z_train: DMatrix<f64>,
    pub y_train: Vec<f64>,
    factor: Factor,
    alpha: DVector<f64>,
    /// Best log marginal likelihood, when the model came out of `fit`.
    pub log_marginal_likelihood: Option<f64>,
}

impl GaussianProcessModel {
    /// Conditions the prior on `(z, y)`. An empty training set yields the prior.
    /// Falls back to the diagonal jitter ladder if `K + σn²I` is numerically singular.
    pub fn condition(params: KernelParams, mode: MeanMode, z: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        check_data(&z, &y)?;
        params.validate(z.ncols().max(1))?;
        let gram = noisy_gram(&params, &z);
        let factor = match linalg::cholesky(&gram, "GP gram matrix") {
            Ok(f) => f,
            Err(_) => linalg::cholesky_jittered(&gram, "GP gram matrix K + σn²I")?,
        };
        let r = mode.residuals(&z, &y);
        let alpha = factor.solve_vec(&r);
        Ok(GaussianProcessModel {
            params,
            mean_mode: mode,
            z_train: z,
            y_train: y,
            factor,
            alpha,
            log_marginal_likelihood: None,
        })
    }

    /// The unconditioned prior over `dim`-dimensional features.
    pub fn prior(params: KernelParams, mode: MeanMode, dim: usize) -> Result<Self> {
        Self::condition(params, mode, DMatrix::zeros(0, dim), vec![])
    }

    pub fn feature_dim(&self) -> usize {
        self.z_train.ncols()
    }

    pub fn noise_var(&self) -> f64 {
        self.params.noise_var
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    fn check_dim(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.ncols() != self.feature_dim() {
            return Err(usage!(
                "test features have {} columns, model was trained on {}",
                z.ncols(),
                self.feature_dim()
            ));
        }
        Ok(())
    }

    /// `L⁻¹ k(Z, z*)`, one column per test row.
    fn whitened_cross(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        if self.z_train.nrows() == 0 {
            return DMatrix::zeros(0, z.nrows());
        }
        let k = kernel_eval(&self.params, &self.z_train, z);
        self.factor.half_solve(&k)
    }

    /// Posterior mean and latent variance per test row.
    pub fn predict(&self, z: &DMatrix<f64>) -> Result<Vec<PredictiveGaussian>> {
        self.check_dim(z)?;
        let v = self.whitened_cross(z);
        let k = if self.z_train.nrows() == 0 {
            DMatrix::zeros(z.nrows(), 0)
        } else {
            kernel_eval(&self.params, z, &self.z_train)
        };
        let s0 = self.params.signal_var;
        let mut out = Vec::with_capacity(z.nrows());
        let mut row = vec![0.0; z.ncols()];
        for p in 0..z.nrows() {
            for (d, r) in row.iter_mut().enumerate() {
                *r = z[(p, d)];
            }
            let mut mean = self.mean_mode.eval(&row);
            for (kj, aj) in k.row(p).iter().zip(self.alpha.iter()) {
                mean += kj * aj;
            }
            let reduction: f64 = v.column(p).iter().map(|x| x * x).sum();
            let mut variance = s0 - reduction;
            if variance < 0.0 {
                if variance < -1e-8 * s0 {
                    log::warn!("posterior variance {variance:e} below zero; clamped");
                }
                variance = 0.0;
            }
            out.push(PredictiveGaussian {
                mean,
                variance,
                noise: self.params.noise_var,
            });
        }
        Ok(out)
    }

    /// Posterior cross-covariance `k_D(Z_a, Z_b)`.
    pub fn posterior_cov(&self, za: &DMatrix<f64>, zb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(za)?;
        self.check_dim(zb)?;
        let prior = kernel_eval(&self.params, za, zb);
        if self.z_train.nrows() == 0 {
            return Ok(prior);
        }
        let va = self.whitened_cross(za);
        let vb = self.whitened_cross(zb);
        Ok(prior - va.transpose() * vb)
    }
}

/// Hyperparameter search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    /// One length scale per feature dimension instead of a shared one.
    pub per_dimension_scales: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 8,
            seed: 0,
            per_dimension_scales: false,
        }
    }
}

struct SearchBox {
    start_lo: Vec<f64>,
    start_hi: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn median_pairwise_distance(z: &DMatrix<f64>) -> f64 {
    let n = z.nrows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            let s: f64 = (0..z.ncols()).map(|c| (z[(i, c)] - z[(j, c)]).powi(2)).sum();
            if s > 0.0 {
                d.push(s.sqrt());
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn search_box(z: &DMatrix<f64>, y: &[f64], mode: MeanMode, n_ls: usize) -> SearchBox {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var_y = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = mode.residuals(z, y);
    let ms_r = r.iter().map(|v| v * v).sum::<f64>() / n;
    let mut scale = var_y.max(ms_r);
    if !(scale > 0.0) {
        scale = 1.0;
    }
    let med = median_pairwise_distance(z);
    let ln = f64::ln;
    let mut start_lo = vec![ln(1e-2 * med); n_ls];
    let mut start_hi = vec![ln(1e2 * med); n_ls];
    let mut lo = vec![ln(1e-3 * med); n_ls];
    let mut hi = vec![ln(1e3 * med); n_ls];
    start_lo.extend([ln(1e-2 * scale), ln(1e-6 * scale)]);
    start_hi.extend([ln(1e2 * scale), ln(scale)]);
    lo.extend([ln(1e-8 * scale), ln(1e-10 * scale)]);
    hi.extend([ln(1e4 * scale), ln(1e1 * scale)]);
    SearchBox { start_lo, start_hi, lo, hi }
}

/// Maximizes the log marginal likelihood over multi-start local searches and
/// conditions on the best hyperparameters. Ties in the objective go to the
/// lower restart index, so the result only depends on `seed`.
pub fn fit(z: &DMatrix<f64>, y: &[f64], mode: MeanMode, options: FitOptions) -> Result<GaussianProcessModel> {
    check_data(z, y)?;
    let mut distinct: Vec<usize> = Vec::new();
    for i in 0..z.nrows() {
        if !distinct.iter().any(|&j| z.row(i) == z.row(j)) {
            distinct.push(i);
        }
    }
    if distinct.len() < 2 {
        return Err(usage!("GP fit needs at least 2 distinct training inputs, got {}", distinct.len()));
    }
    let restarts = options.restarts.max(1);
    let n_ls = if options.per_dimension_scales { z.ncols() } else { 1 };
    let sb = search_box(z, y, mode, n_ls);

    let mut rng = rng::stream(options.seed, "gp-restarts");
    let starts: Vec<Vec<f64>> = (0..restarts)
        .map(|k| {
            sb.start_lo
                .iter()
                .zip(&sb.start_hi)
                .map(|(lo, hi)| {
                    let u: f64 = rng.random();
                    if k == 0 {
                        0.5 * (lo + hi)
                    } else {
                        lo + (hi - lo) * u
                    }
                })
                .collect()
        })
        .collect();

    let run = |x0: &Vec<f64>| -> Option<optim::Minimum> {
        let objective = |x: &[f64]| {
            let p = KernelParams::from_log(x);
            lml_with_grad(&p, z, y, mode, true)
                .ok()
                .map(|(f, g)| (-f, g.unwrap().into_iter().map(|v| -v).collect()))
        };
        optim::minimize(objective, x0, &sb.lo, &sb.hi, &optim::Settings::default())
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Option<optim::Minimum>> = {
        use rayon::prelude::*;
        starts.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Option<optim::Minimum>> = starts.iter().map(run).collect();

    let mut best: Option<(usize, optim::Minimum)> = None;
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Some(m) if m.f.is_finite() => {
                if best.as_ref().is_none_or(|(_, b)| m.f < b.f) {
                    best = Some((k, m));
                }
            }
            _ => failures.push(k),
        }
    }
    let Some((k, m)) = best else {
        return Err(numeric!(
            "all {restarts} GP hyperparameter restarts failed (non-PD gram matrix at every start); n = {}, dim = {}",
            y.len(),
            z.ncols()
        ));
    };
    log::debug!("GP fit: restart {k} won with lml {} after {} iterations", -m.f, m.iterations);
    let mut model = GaussianProcessModel::condition(KernelParams::from_log(&m.x), mode, z.clone(), y.to_vec())?;
    model.log_marginal_likelihood = Some(-m.f);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn kernel_closed_forms() {
        let p = KernelParams::isotropic(0.7, 2.5, 0.0);
        let a = DMatrix::from_row_slice(1, 2, &[0.3, -0.1]);
        assert_eq!(kernel_eval(&p, &a, &a)[(0, 0)], 2.5);
        // |z − z'| = ℓ√2
        let d = 0.7 * 2f64.sqrt();
        let b = DMatrix::from_row_slice(1, 2, &[0.3 + d, -0.1]);
        assert!((kernel_eval(&p, &a, &b)[(0, 0)] - 2.5 * (-1f64).exp()).abs() < 1e-14);

        let wide = KernelParams::isotropic(1e9, 1.3, 0.0);
        let u = DMatrix::from_fn(4, 2, |r, c| (r as f64 * 0.3 + c as f64 * 0.2).fract());
        assert!(kernel_eval(&wide, &u, &u).iter().all(|v| (v - 1.3).abs() < 1e-9));
    }

    #[test]
    fn scalar_lml() {
        let p = KernelParams::isotropic(1.0, 0.8, 0.2);
        let c = 1.0;
        let y = 0.7;
        let l = log_marginal_likelihood(&p, &col(&[0.0]), &[y], MeanMode::Zero).unwrap();
        let expect = -0.5 * y * y / c - 0.5 * c.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((l - expect).abs() < 1e-14);
    }

    #[test]
    fn duplicate_rows_without_noise_are_singular() {
        let p = KernelParams::isotropic(1.0, 1.0, 0.0);
        let z = col(&[0.5, 0.5, 1.0]);
        let err = log_marginal_likelihood(&p, &z, &[1.0, 1.0, 2.0], MeanMode::Zero).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn exact_interpolation_and_prior_reversion() {
        let z = col(&[0.0, 0.8, 1.6, 2.4]);
        let y = [0.3, -0.2, 0.9, 0.1];
        let p = KernelParams::isotropic(0.6, 1.5, 0.0);
        let m = GaussianProcessModel::condition(p, MeanMode::Zero, z.clone(), y.to_vec()).unwrap();
        for (pg, yi) in m.predict(&z).unwrap().iter().zip(y) {
            assert!((pg.mean - yi).abs() < 1e-10);
            assert!(pg.variance <= 1e-8 * 1.5);
        }
        let far = m.predict(&col(&[100.0])).unwrap()[0];
        assert!(far.mean.abs() < 1e-12);
        assert!((far.variance - 1.5).abs() <= 1e-6 * 1.5);
    }

    #[test]
    fn lf_passthrough_reverts_to_y_lf() {
        let z = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.5, 2.0, 1.0]);
        let p = KernelParams::isotropic(0.5, 1.0, 1e-4);
        let m = GaussianProcessModel::condition(p, MeanMode::LfPassthrough, z, vec![0.1, 1.2, 2.1]).unwrap();
        let far = DMatrix::from_row_slice(1, 2, &[7.5, 40.0]);
        assert!((m.predict(&far).unwrap()[0].mean - 7.5).abs() < 1e-12);
    }

    #[test]
    fn prior_model_predicts_prior() {
        let p = KernelParams::isotropic(0.5, 2.0, 0.1);
        let m = GaussianProcessModel::prior(p, MeanMode::LfPassthrough, 2).unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, -0.5, 3.0]);
        let pr = m.predict(&z).unwrap();
        assert_eq!(pr[0].mean, 1.5);
        assert_eq!(pr[1].variance, 2.0);
        let c = m.posterior_cov(&z, &z).unwrap();
        assert_eq!(c, kernel_eval(&m.params, &z, &z));
    }

    #[test]
    fn posterior_cov_consistency() {
        let z = col(&[0.0, 0.5, 1.3]);
        let p = KernelParams::isotropic(0.4, 1.0, 0.05);
        let m = GaussianProcessModel::condition(p, MeanMode::Zero, z.clone(), vec![1.0, 0.0, -1.0]).unwrap();
        let a = col(&[0.1, 0.7, 2.0, -0.4]);
        let b = col(&[0.2, 1.1]);
        let cab = m.posterior_cov(&a, &b).unwrap();
        let cba = m.posterior_cov(&b, &a).unwrap();
        assert!((cab - cba.transpose()).abs().max() <= 1e-12);
        let caa = m.posterior_cov(&a, &a).unwrap();
        for (i, pg) in m.predict(&a).unwrap().iter().enumerate() {
            assert!((caa[(i, i)] - pg.variance).abs() <= 1e-10);
        }

        let single = GaussianProcessModel::condition(
            KernelParams::isotropic(0.4, 1.0, 0.0),
            MeanMode::Zero,
            col(&[0.3]),
            vec![1.0],
        )
        .unwrap();
        assert!(single.posterior_cov(&col(&[0.3]), &col(&[0.3])).unwrap()[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn fit_needs_two_distinct_points() {
        let z = col(&[1.0, 1.0, 1.0]);
        assert_eq!(fit(&z, &[0.0, 1.0, 2.0], MeanMode::Zero, FitOptions::default()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn fit_constant_targets_reverts_to_constant() {
        let z = col(&[0.0, 0.3, 0.6, 0.9, 1.2, 1.5]);
        let y = vec![2.5; 6];
        let m = fit(&z, &y, MeanMode::Zero, FitOptions::default()).unwrap();
        for p in m.predict(&col(&[0.45, 1.0])).unwrap() {
            assert!((p.mean - 2.5).abs() < 1e-3, "{}", p.mean);
        }
    }
}
