//! Kernel density estimates, KL divergence on a grid, and Monte Carlo error.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bmfmc::SupportGrid;
use crate::error::{usage, Error, Result};
use crate::linalg::pairwise_sum;
use crate::par;

/// Largest sample used for the leave-one-out bandwidth search.
pub const CV_MAX_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    #[default]
    Silverman,
    CvGrid,
}

/// Gaussian KDE over 1-d samples.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeEstimate {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = pairwise_sum(x) / n;
    let dev: Vec<f64> = x.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// `1.06·σ̂·n^(−1/5)`
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let (_, sd) = mean_std(samples);
    1.06 * sd * (samples.len() as f64).powf(-0.2)
}

/// Leave-one-out log-likelihood of a Gaussian KDE with bandwidth `h`.
pub fn loo_log_likelihood(samples: &[f64], h: f64) -> f64 {
    let n = samples.len();
    let norm = 1.0 / ((n - 1) as f64 * h * (2.0 * PI).sqrt());
    let per: Vec<f64> = par::map(n, |i| {
        let xi = samples[i];
        let mut s = 0.0;
        for (j, xj) in samples.iter().enumerate() {
            if j != i {
                let u = (xi - xj) / h;
                s += (-0.5 * u * u).exp();
            }
        }
        (s * norm).max(f64::MIN_POSITIVE).ln()
    });
    pairwise_sum(&per)
}

pub fn kde_fit(samples: &[f64], mode: BandwidthMode) -> Result<KdeEstimate> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(usage!("KDE samples must be finite"));
    }
    let first = samples.first().copied();
    if samples.len() < 2 || samples.iter().all(|v| Some(*v) == first) {
        return Err(usage!("KDE needs at least 2 distinct samples"));
    }
    let h0 = silverman_bandwidth(samples);
    let bandwidth = match mode {
        BandwidthMode::Silverman => h0,
        BandwidthMode::CvGrid => {
            // the factor over Silverman is chosen on at most CV_MAX_SAMPLES
            // stride-selected points and then applied to the full-sample h
            let sub: Vec<f64> = if samples.len() > CV_MAX_SAMPLES {
                (0..CV_MAX_SAMPLES).map(|k| samples[k * samples.len() / CV_MAX_SAMPLES]).collect()
            } else {
                samples.to_vec()
            };
            let h_sub = silverman_bandwidth(&sub);
            let mut best = (f64::NEG_INFINITY, 1.0);
            for k in 0..30 {
                let factor = 10f64.powf(-1.0 + 1.5 * k as f64 / 29.0);
                let ll = loo_log_likelihood(&sub, h_sub * factor);
                if ll > best.0 {
                    best = (ll, factor);
                }
            }
            h0 * best.1
        }
    };
    Ok(KdeEstimate {
        samples: samples.to_vec(),
        bandwidth,
    })
}

impl KdeEstimate {
    pub fn evaluate(&self, support: &SupportGrid) -> Vec<f64> {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * PI).sqrt());
        let pts = support.points();
        par::map(pts.len(), |l| {
            let y = pts[l];
            let terms: Vec<f64> = self
                .samples
                .iter()
                .map(|x| {
                    let u = (y - x) / h;
                    (-0.5 * u * u).exp()
                })
                .collect();
            pairwise_sum(&terms) * norm
        })
    }
}

/// `D_KL(p ‖ q)` by trapezoid quadrature of `p·ln(p/q)` on the shared grid.
/// `q` is floored at `1e-12·max(q)`; the result is clamped at 0.
pub fn kld(p: &[f64], q: &[f64], support: &SupportGrid) -> Result<f64> {
    if p.len() != support.len() || q.len() != support.len() {
        return Err(usage!(
            "KLD grid mismatch: p has {}, q has {}, support has {} points",
            p.len(),
            q.len(),
            support.len()
        ));
    }
    let q_max = q.iter().copied().fold(0.0, f64::max);
    if !(q_max > 0.0) {
        return Err(usage!("KLD reference q is identically zero"));
    }
    let floor = 1e-12 * q_max;
    let integrand: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi.max(floor)).ln() } else { 0.0 })
        .collect();
    let v = support.integrate(&integrand);
    if v < -1e-10 {
        log::warn!("KLD quadrature returned {v:e}; clamped at 0");
    }
    Ok(v.max(0.0))
}

/// `σ̂/√n`
pub fn mc_standard_error(sample_std: f64, n: usize) -> f64 {
    sample_std / (n as f64).sqrt()
}

/// One line of the metrics ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub inputs_hash: String,
}

/// Appends records to a JSON-lines ledger.
pub fn append_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("metric records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmfmc::normal_pdf;

    fn gaussian_on(g: &SupportGrid, m: f64, v: f64) -> Vec<f64> {
        g.points().iter().map(|&y| normal_pdf(y, m, v)).collect()
    }

    #[test]
    fn degenerate_samples_rejected() {
        assert!(kde_fit(&[0.0], BandwidthMode::Silverman).is_err());
        assert!(kde_fit(&[2.0, 2.0, 2.0], BandwidthMode::CvGrid).is_err());
    }

    #[test]
    fn closed_form_gaussian_klds() {
        let g = SupportGrid::equispaced(-15.0, 15.0, 3001).unwrap();
        let p = gaussian_on(&g, 0.0, 1.0);
        assert!(kld(&p, &p, &g).unwrap() < 1e-12);
        let shifted = kld(&p, &gaussian_on(&g, 0.5, 1.0), &g).unwrap();
        assert!((shifted / 0.125 - 1.0).abs() < 0.02);
        let wide = kld(&p, &gaussian_on(&g, 0.0, 4.0), &g).unwrap();
        let expect = 0.5 * (0.25 + 4f64.ln() - 1.0);
        assert!((wide / expect - 1.0).abs() < 0.02);
        let back = kld(&gaussian_on(&g, 0.0, 4.0), &p, &g).unwrap();
        assert!((back - wide).abs() > 0.1);
    }

    #[test]
    fn grid_mismatch() {
        let g = SupportGrid::equispaced(0.0, 1.0, 3).unwrap();
        assert_eq!(kld(&[1.0; 3], &[1.0; 2], &g).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn mc_error_arithmetic() {
        assert_eq!(mc_standard_error(1.0, 10_000), 0.01);
        assert_eq!(mc_standard_error(3.7, 1), 3.7);
        assert_eq!(mc_standard_error(2.0, 4), 1.0);
    }
}
