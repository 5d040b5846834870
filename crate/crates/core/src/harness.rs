//! Closed-form synthetic HF/LF model pairs standing in for expensive solvers,
//! plus a direct nested-loop evaluation of the posterior density statistics
//! used as a test oracle.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::bmfmc::SupportGrid;
use crate::error::{config, usage, Result};
use crate::gp::GaussianProcessModel;
use crate::inputs::{
    assemble_samples, Amplitude, BlockSpec, FieldGrid, MeanProfile, RandomFieldSpec, ScalarDistribution,
};
use crate::metrics::{kde_fit, BandwidthMode};

pub const REFERENCE_SAMPLES: usize = 100_000;
pub const REFERENCE_SEED: u64 = 424_242;

/// Loadings of the LF output on the six inputs of `hidden-bimodal`.
const BIMODAL_LOADINGS: [f64; 6] = [1.0, 0.5, 0.35, 0.25, 0.15, 0.1];
const KLE_FIELD_POINTS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fidelity {
    High,
    Low,
}

/// A named synthetic family with its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// LF and HF are the same function.
    Identical,
    /// LF is built from inputs the HF never sees.
    Indep,
    /// `y_LF = ρ·h(x_a) + √(1 − ρ²)·h(x_b)` with `y_HF = h(x_a)`.
    Blend { dependency: f64 },
    /// `y_HF = y_LF + 0.1·sin(25·x₁)`
    NoisyLinear,
    /// `y_HF = y_LF + shift·sign(x₀)` where `x₀` also dominates `y_LF`.
    HiddenBimodal {
        #[serde(default = "default_shift")]
        shift: f64,
    },
    /// Outputs are functionals of a sampled 1-d random field and one scalar.
    KleField,
}

fn default_shift() -> f64 {
    0.5
}

impl Family {
    pub fn hidden_bimodal() -> Self {
        Family::HiddenBimodal { shift: default_shift() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Identical => "identical",
            Family::Indep => "indep",
            Family::Blend { .. } => "blend",
            Family::NoisyLinear => "noisy-linear",
            Family::HiddenBimodal { .. } => "hidden-bimodal",
            Family::KleField => "kle-field",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Family::Blend { dependency } if !(0.0..=1.0).contains(&dependency) => {
                Err(config!("blend dependency must lie in [0, 1], got {dependency}"))
            }
            Family::HiddenBimodal { shift } if !shift.is_finite() => Err(config!("hidden-bimodal shift must be finite")),
            _ => Ok(()),
        }
    }

    /// The input blocks this family is defined on.
    pub fn inputs(&self) -> Vec<BlockSpec> {
        let std_normal = |name: &str| BlockSpec::scalar(name, ScalarDistribution::Normal { mean: 0.0, var: 1.0 });
        match self {
            Family::Identical | Family::Indep | Family::Blend { .. } | Family::HiddenBimodal { .. } => {
                (0..6).map(|i| std_normal(&format!("x{i}"))).collect()
            }
            Family::NoisyLinear => (0..2).map(|i| std_normal(&format!("x{i}"))).collect(),
            Family::KleField => vec![
                BlockSpec::field(
                    "u",
                    RandomFieldSpec {
                        grid: FieldGrid::CellCentred { lo: 0.0, hi: 1.0, n: KLE_FIELD_POINTS },
                        mean: MeanProfile::Constant(0.0),
                        amplitude: Amplitude::Constant(1.0),
                        length_scale: 0.3,
                    },
                ),
                BlockSpec::scalar("s", ScalarDistribution::Uniform { lo: -1.0, hi: 1.0 }),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.inputs().iter().map(BlockSpec::width).sum()
    }

    fn eval_row(&self, which: Fidelity, x: &[f64]) -> f64 {
        match *self {
            Family::Identical => blend_h(&x[0..3]),
            Family::Indep => blend(0.0, which, x),
            Family::Blend { dependency } => blend(dependency, which, x),
            Family::NoisyLinear => {
                let lf = x[0] + 0.5 * x[1];
                match which {
                    Fidelity::Low => lf,
                    Fidelity::High => lf + 0.1 * (25.0 * x[1]).sin(),
                }
            }
            Family::HiddenBimodal { shift } => {
                let lf: f64 = BIMODAL_LOADINGS.iter().zip(x).map(|(c, v)| c * v).sum();
                match which {
                    Fidelity::Low => lf,
                    Fidelity::High => lf + shift * x[0].signum(),
                }
            }
            Family::KleField => {
                let n = KLE_FIELD_POINTS as f64;
                let (mut a, mut b) = (0.0, 0.0);
                for (i, u) in x[..KLE_FIELD_POINTS].iter().enumerate() {
                    let t = (i as f64 + 0.5) / n;
                    a += u * (std::f64::consts::PI * t).sin() / n;
                    b += u * (2.0 * std::f64::consts::PI * t).sin() / n;
                }
                let s = x[KLE_FIELD_POINTS];
                let lf = 2.0 * a + 0.5 * s;
                match which {
                    Fidelity::Low => lf,
                    Fidelity::High => lf + 3.0 * b * b + 0.3 * a * s,
                }
            }
        }
    }
}

fn blend_h(u: &[f64]) -> f64 {
    u[0] + 0.5 * u[1] + 0.25 * u[2] + 0.2 * u[0] * u[0]
}

fn blend(rho: f64, which: Fidelity, x: &[f64]) -> f64 {
    let hf = blend_h(&x[0..3]);
    match which {
        Fidelity::High => hf,
        Fidelity::Low if rho == 1.0 => hf,
        Fidelity::Low => rho * hf + (1.0 - rho * rho).sqrt() * blend_h(&x[3..6]),
    }
}

/// A family together with a counter of HF evaluations.
#[derive(Debug)]
pub struct Harness {
    pub family: Family,
    hf_calls: AtomicUsize,
}

impl Harness {
    pub fn new(family: Family) -> Result<Self> {
        family.validate()?;
        Ok(Harness {
            family,
            hf_calls: AtomicUsize::new(0),
        })
    }

    /// Rowwise evaluation. HF calls are added to the budget.
    pub fn evaluate(&self, which: Fidelity, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let d = self.family.input_dim();
        if x.ncols() != d {
            return Err(usage!("{} expects {d} input columns, got {}", self.family.name(), x.ncols()));
        }
        let mut row = vec![0.0; d];
        let out = (0..x.nrows())
            .map(|r| {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = x[(r, c)];
                }
                self.family.eval_row(which, &row)
            })
            .collect();
        if which == Fidelity::High {
            self.hf_calls.fetch_add(x.nrows(), Ordering::SeqCst);
        }
        Ok(out)
    }

    /// Number of HF evaluations so far.
    pub fn hf_budget_used(&self) -> usize {
        self.hf_calls.load(Ordering::SeqCst)
    }
}

/// KDE (Silverman bandwidth) of `n_ref` direct HF draws on `support`.
/// Does not touch any HF budget.
pub fn reference_density(family: &Family, n_ref: usize, seed: u64, support: &SupportGrid) -> Result<Vec<f64>> {
    let y = reference_draws(family, n_ref, seed)?;
    Ok(kde_fit(&y, BandwidthMode::Silverman)?.evaluate(support))
}

/// `n` direct HF outputs on fresh input samples.
pub fn reference_draws(family: &Family, n: usize, seed: u64) -> Result<Vec<f64>> {
    family.validate()?;
    let x = assemble_samples(&family.inputs(), n, seed)?;
    let mut row = vec![0.0; x.dim()];
    Ok((0..n)
        .map(|r| {
            for (c, v) in row.iter_mut().enumerate() {
                *v = x.data[(r, c)];
            }
            family.eval_row(Fidelity::High, &row)
        })
        .collect())
}

/// Posterior density mean and variance by a direct transcription of the
/// nested loops: dense 2×2 covariance, explicit inverse and determinant,
/// plain running sums. Quadratic in `N`, so limited to `N <= 100`.
pub fn algorithm3_oracle(
    model: &GaussianProcessModel,
    z_star: &DMatrix<f64>,
    support: &SupportGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = z_star.nrows();
    if n == 0 || n > 100 {
        return Err(usage!("oracle supports 1..=100 test features, got {n}"));
    }
    let pred = model.predict(z_star)?;
    let m: Vec<f64> = pred.iter().map(|p| p.mean).collect();
    let v: Vec<f64> = pred.iter().map(|p| p.variance).collect();
    let noise = model.noise_var();
    let ys = support.points();
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut mean = vec![0.0; ys.len()];
    for (j, mj) in m.iter().enumerate() {
        let s2 = v[j] + noise;
        for (l, y) in ys.iter().enumerate() {
            mean[l] += (-(y - mj).powi(2) / (2.0 * s2)).exp() / (two_pi * s2).sqrt();
        }
    }
    for p in &mut mean {
        *p /= n as f64;
    }

    let k = model.posterior_cov(z_star, z_star)?;
    let mut var = vec![0.0; ys.len()];
    let mut terms = 0usize;
    for (j, (mu1, v1)) in m.iter().zip(&v).enumerate() {
        for (i, (mu2, v2)) in m.iter().zip(&v).enumerate() {
            let kij = k[(i, j)];
            let sigma = Matrix2::new(v1 + noise, kij, kij, v2 + noise);
            let inv = sigma.try_inverse().ok_or_else(|| usage!("singular 2×2 covariance at ({i}, {j})"))?;
            let det = sigma.determinant();
            for (l, y) in ys.iter().enumerate() {
                let d = Vector2::new(y - mu1, y - mu2);
                let q = (d.transpose() * inv * d)[(0, 0)];
                var[l] += (-0.5 * q).exp() / (two_pi * det.sqrt());
            }
            terms += 1;
        }
    }
    for (p, mu) in var.iter_mut().zip(&mean) {
        *p = *p / terms as f64 - mu * mu;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputs::assemble_samples;

    #[test]
    fn identical_family_is_exact() {
        for fam in [Family::Identical, Family::Blend { dependency: 1.0 }] {
            let h = Harness::new(fam.clone()).unwrap();
            let x = assemble_samples(&fam.inputs(), 200, 3).unwrap();
            assert_eq!(h.evaluate(Fidelity::High, &x.data).unwrap(), h.evaluate(Fidelity::Low, &x.data).unwrap());
        }
    }

    #[test]
    fn budget_counts_hf_only() {
        let h = Harness::new(Family::NoisyLinear).unwrap();
        let x = assemble_samples(&Family::NoisyLinear.inputs(), 17, 1).unwrap();
        h.evaluate(Fidelity::Low, &x.data).unwrap();
        assert_eq!(h.hf_budget_used(), 0);
        h.evaluate(Fidelity::High, &x.data.rows(0, 5).into_owned()).unwrap();
        assert_eq!(h.hf_budget_used(), 5);
    }

    #[test]
    fn dimension_mismatch() {
        let h = Harness::new(Family::Indep).unwrap();
        assert_eq!(h.evaluate(Fidelity::Low, &DMatrix::zeros(3, 2)).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hidden_bimodal_conditional_is_two_point() {
        // fix y_LF by fixing all inputs but the sign of x0; HF then takes two values
        let f = Family::HiddenBimodal { shift: 0.8 };
        let mut seen = Vec::new();
        for x0 in [-0.3, 0.3] {
            let rest = [0.1, -0.2, 0.4, 0.0, 0.5];
            let mut x = vec![x0];
            x.extend(rest);
            let lf = f.eval_row(Fidelity::Low, &x);
            let hf = f.eval_row(Fidelity::High, &x);
            seen.push(hf - lf);
        }
        assert_eq!(seen, vec![-0.8, 0.8]);
    }

    #[test]
    fn invalid_knobs() {
        assert!(Harness::new(Family::Blend { dependency: 1.5 }).is_err());
    }

    #[test]
    fn kle_field_dimension() {
        assert_eq!(Family::KleField.input_dim(), KLE_FIELD_POINTS + 1);
    }
}
