//! Theoretical cost ratios for relaxed LF solvers and the resulting
//! end-to-end speed-up of the multi-fidelity estimator over plain HF Monte
//! Carlo.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};

pub const DEFAULT_CFL_GAMMA: f64 = 1.5;

fn default_cfl() -> f64 {
    DEFAULT_CFL_GAMMA
}

/// Discretization and solver settings that drive the cost of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    /// Polynomial degree.
    pub k: u32,
    /// Mesh size.
    pub h: f64,
    /// Spatial dimension.
    pub d: u32,
    /// Solver tolerance.
    pub eps: f64,
    /// 1 for double precision, 2 for single.
    pub precision: f64,
    #[serde(default = "default_cfl")]
    pub cfl_gamma: f64,
}

impl CostSpec {
    pub fn new(k: u32, h: f64, d: u32, eps: f64, precision: f64) -> Self {
        CostSpec {
            k,
            h,
            d,
            eps,
            precision,
            cfl_gamma: DEFAULT_CFL_GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(config!("polynomial degree must be >= 1"));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(config!("mesh size must be positive"));
        }
        if !(1..=3).contains(&self.d) {
            return Err(config!("spatial dimension must be 1, 2 or 3"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(config!("solver tolerance must lie in (0, 1)"));
        }
        if self.precision != 1.0 && self.precision != 2.0 {
            return Err(config!("precision factor must be 1 or 2"));
        }
        if !(1.0..=2.0).contains(&self.cfl_gamma) {
            return Err(config!("CFL exponent must lie in [1, 2]"));
        }
        Ok(())
    }
}

/// `((k+1)/h)^d · (k^γ/h) · (−ln ε) / 𝔭`
pub fn relative_cost(spec: &CostSpec) -> Result<f64> {
    spec.validate()?;
    let k = spec.k as f64;
    let dofs = ((k + 1.0) / spec.h).powi(spec.d as i32);
    let steps = k.powf(spec.cfl_gamma) / spec.h;
    let iterations = -spec.eps.ln();
    Ok(dofs * steps * iterations / spec.precision)
}

/// Cost of `hf` over cost of `lf`. Both must share a spatial dimension
/// unless `allow_dim_change` is set.
pub fn lf_speedup(hf: &CostSpec, lf: &CostSpec, allow_dim_change: bool) -> Result<f64> {
    if hf.d != lf.d && !allow_dim_change {
        return Err(usage!(
            "HF is {}-d but LF is {}-d; cross-dimension ratios need the override",
            hf.d,
            lf.d
        ));
    }
    Ok(relative_cost(hf)? / relative_cost(lf)?)
}

/// `n·f / (n + n_train·f)` with equal HF and LF sample counts `n`.
pub fn mf_speedup(f_hf_lf: f64, n_mc: usize, n_train: usize) -> f64 {
    let n = n_mc as f64;
    n * f_hf_lf / (n + n_train as f64 * f_hf_lf)
}

/// One row of a speed-up table. Give either `f_hf_lf` directly or both cost specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub label: String,
    #[serde(default)]
    pub f_hf_lf: Option<f64>,
    #[serde(default)]
    pub hf: Option<CostSpec>,
    #[serde(default)]
    pub lf: Option<CostSpec>,
    pub n_mc: usize,
    pub n_train: usize,
    #[serde(default)]
    pub allow_dim_change: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTable {
    pub rows: Vec<SpeedupRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupResult {
    pub label: String,
    pub f_hf_lf: f64,
    pub n_mc: usize,
    pub n_train: usize,
    pub speedup: f64,
}

impl SpeedupTable {
    /// The three LF variants of the cylinder-flow study.
    pub fn cylinder_example() -> Self {
        let row = |label: &str, f: f64| SpeedupRow {
            label: label.into(),
            f_hf_lf: Some(f),
            hf: None,
            lf: None,
            n_mc: 7000,
            n_train: 50,
            allow_dim_change: false,
        };
        SpeedupTable {
            rows: vec![row("LF 1", 4.5), row("LF 2", 10.0), row("LF 3", 28.0)],
        }
    }

    pub fn evaluate(&self) -> Result<Vec<SpeedupResult>> {
        self.rows
            .iter()
            .map(|r| {
                let f = match (r.f_hf_lf, &r.hf, &r.lf) {
                    (Some(f), None, None) => f,
                    (None, Some(hf), Some(lf)) => lf_speedup(hf, lf, r.allow_dim_change)?,
                    _ => {
                        return Err(config!(
                            "row '{}': give either f_hf_lf or both hf and lf cost specs",
                            r.label
                        ))
                    }
                };
                if !(f > 0.0) || r.n_mc == 0 {
                    return Err(config!("row '{}': cost ratio and n_mc must be positive", r.label));
                }
                Ok(SpeedupResult {
                    label: r.label.clone(),
                    f_hf_lf: f,
                    n_mc: r.n_mc,
                    n_train: r.n_train,
                    speedup: mf_speedup(f, r.n_mc, r.n_train),
                })
            })
            .collect()
    }
}

/// Writes `label,f_hf_lf,n_mc,n_train,speedup` with the speed-up to one decimal
/// and a full-precision column.
pub fn write_speedup_csv(path: &Path, results: &[SpeedupResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["label", "f_hf_lf", "n_mc", "n_train", "speedup", "speedup_exact"])
        .map_err(|e| Error::format(path, e))?;
    for r in results {
        w.write_record([
            r.label.clone(),
            format!("{}", r.f_hf_lf),
            r.n_mc.to_string(),
            r.n_train.to_string(),
            format!("{:.1}", r.speedup),
            format!("{}", r.speedup),
        ])
        .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_case() {
        let mut s = CostSpec::new(1, 1.0, 1, (-1f64).exp(), 1.0);
        s.cfl_gamma = 1.0;
        assert!((relative_cost(&s).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mesh_doubling_and_precision() {
        let mut a = CostSpec::new(3, 0.1, 2, 1e-6, 1.0);
        a.cfl_gamma = 1.0;
        let mut b = a;
        b.h = 0.2;
        let r = relative_cost(&b).unwrap() / relative_cost(&a).unwrap();
        assert!((r - 0.125).abs() < 1e-14);
        let mut single = a;
        single.precision = 2.0;
        assert_eq!(relative_cost(&single).unwrap() * 2.0, relative_cost(&a).unwrap());
    }

    #[test]
    fn tolerance_ratio() {
        let hf = CostSpec::new(4, 0.1, 2, 1e-6, 1.0);
        let mut lf = hf;
        lf.eps = 1e-4;
        assert!((lf_speedup(&hf, &lf, false).unwrap() - 1.5).abs() < 1e-12);
        assert!((lf_speedup(&hf, &hf, false).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let a = CostSpec::new(2, 0.1, 2, 1e-6, 1.0);
        let mut b = a;
        b.d = 3;
        assert_eq!(lf_speedup(&a, &b, false).unwrap_err().exit_code(), 2);
        assert!(lf_speedup(&a, &b, true).is_ok());
    }

    #[test]
    fn invalid_spec() {
        let mut a = CostSpec::new(2, 0.1, 2, 1e-6, 1.0);
        a.precision = 1.5;
        assert!(relative_cost(&a).is_err());
    }
}
