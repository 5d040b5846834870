//! Browser bindings for the demo page in `www/`.
//!
//! Every export returns flat `f64` buffers so the page can draw them without
//! any serialization layer.

use bmfmc::costmodel::{mf_speedup, SpeedupTable};
use bmfmc::harness::{reference_density, Family};
use bmfmc::inputs::{sample_field, RandomFieldSpec};
use bmfmc::metrics::kld;
use bmfmc::pipeline::{run_pipeline, RunConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: bmfmc::Error) -> String {
    e.to_string()
}

/// Realizations of a stochastic inflow profile.
#[wasm_bindgen]
pub struct FieldSample {
    coords: Vec<f64>,
    mean: Vec<f64>,
    values: Vec<f64>,
    rows: usize,
}

#[wasm_bindgen]
impl FieldSample {
    pub fn coords(&self) -> Vec<f64> {
        self.coords.clone()
    }
    pub fn mean(&self) -> Vec<f64> {
        self.mean.clone()
    }
    /// Row-major, one realization per row.
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// `kind` is `channel` or `wall`.
#[wasm_bindgen]
pub fn inflow_field(kind: &str, points: usize, realizations: usize, seed: u64) -> Result<FieldSample, String> {
    let spec = match kind {
        "channel" => RandomFieldSpec::channel_inflow(points),
        "wall" => RandomFieldSpec::wall_inflow(points),
        other => return Err(format!("unknown inflow {other:?}")),
    };
    let m = sample_field(&spec, realizations, seed).map_err(js_err)?;
    let values = (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect();
    Ok(FieldSample {
        coords: spec.grid.coords(),
        mean: spec.mean_vec(),
        values,
        rows: m.nrows(),
    })
}

/// Posterior density of the HF output with its two-sigma band and a
/// reference density built from direct HF draws.
#[wasm_bindgen]
pub struct DensityRun {
    support: Vec<f64>,
    mean: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    reference: Vec<f64>,
    kld: f64,
    hf_calls: usize,
}

#[wasm_bindgen]
impl DensityRun {
    pub fn support(&self) -> Vec<f64> {
        self.support.clone()
    }
    pub fn mean(&self) -> Vec<f64> {
        self.mean.clone()
    }
    pub fn lower(&self) -> Vec<f64> {
        self.lower.clone()
    }
    pub fn upper(&self) -> Vec<f64> {
        self.upper.clone()
    }
    pub fn reference(&self) -> Vec<f64> {
        self.reference.clone()
    }
    /// KL divergence of the reference from the posterior mean density.
    pub fn kld(&self) -> f64 {
        self.kld
    }
    pub fn hf_calls(&self) -> usize {
        self.hf_calls
    }
}

fn family(name: &str) -> Result<Family, String> {
    Ok(match name {
        "hidden-bimodal" => Family::hidden_bimodal(),
        "noisy-linear" => Family::NoisyLinear,
        "kle-field" => Family::KleField,
        "identical" => Family::Identical,
        "indep" => Family::Indep,
        other => return Err(format!("unknown model family {other:?}")),
    })
}

#[wasm_bindgen]
pub fn density_run(name: &str, n_sample: usize, n_train: usize, seed: u64) -> Result<DensityRun, String> {
    let fam = family(name)?;
    let mut cfg = RunConfig::harness(fam.clone());
    cfg.n_sample = n_sample;
    cfg.n_train = n_train;
    cfg.seed = seed;
    cfg.restarts = cfg.restarts.min(4);
    cfg.reference.n_ref = 20_000;
    let out = run_pipeline(&cfg).map_err(js_err)?;
    let p = &out.prediction;
    let (lower, upper) = p.credible_band();
    let reference = reference_density(&fam, cfg.reference.n_ref, cfg.reference.seed, &p.support).map_err(js_err)?;
    let d = kld(&reference, &p.mean, &p.support).map_err(js_err)?;
    Ok(DensityRun {
        support: p.support.points().to_vec(),
        mean: p.mean.clone(),
        lower,
        upper,
        reference,
        kld: d,
        hf_calls: out.hf_calls,
    })
}

/// Multi-fidelity speed-up for `n_train = 1..=max_train` at a fixed LF cost ratio.
#[wasm_bindgen]
pub fn speedup_curve(f_hf_lf: f64, n_mc: usize, max_train: usize) -> Vec<f64> {
    (1..=max_train).map(|n| mf_speedup(f_hf_lf, n_mc, n)).collect()
}

/// Cost ratios of the three cylinder LF models, in table order.
#[wasm_bindgen]
pub fn cylinder_ratios() -> Result<Vec<f64>, String> {
    let rows = SpeedupTable::cylinder_example().evaluate().map_err(js_err)?;
    Ok(rows.iter().map(|r| r.f_hf_lf).collect())
}
