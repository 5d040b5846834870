//! Input uncertainty: independent scalar laws and discretized Gaussian random
//! fields with a non-stationary amplitude, plus seeded Monte Carlo sampling of
//! the joint input density into a [`SampleMatrix`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, numeric, usage, Result};
use crate::linalg;
use crate::rng::{self, StreamRng};

/// Law of a single uncorrelated input variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum ScalarDistribution {
    Uniform { lo: f64, hi: f64 },
    /// `ln X ~ N(mu, var)`
    LogNormal { mu: f64, var: f64 },
    Normal { mean: f64, var: f64 },
}

impl ScalarDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(config!("uniform needs finite lo < hi, got [{lo}, {hi})"));
                }
            }
            ScalarDistribution::LogNormal { mu, var } | ScalarDistribution::Normal { mean: mu, var } => {
                if !(mu.is_finite() && var.is_finite() && var > 0.0) {
                    return Err(config!("need finite location and variance > 0, got ({mu}, {var})"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            ScalarDistribution::LogNormal { mu, var } => (mu + 0.5 * var).exp(),
            ScalarDistribution::Normal { mean, .. } => mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ScalarDistribution::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            ScalarDistribution::LogNormal { mu, var } => (var.exp() - 1.0) * (2.0 * mu + var).exp(),
            ScalarDistribution::Normal { var, .. } => var,
        }
    }

    fn draw(&self, n: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.validate()?;
        let out = match *self {
            ScalarDistribution::Uniform { lo, hi } => (0..n)
                .map(|_| lo + (hi - lo) * rng.random::<f64>())
                .collect(),
            ScalarDistribution::LogNormal { mu, var } => {
                let d = LogNormal::new(mu, var.sqrt()).map_err(|e| config!("lognormal: {e}"))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            ScalarDistribution::Normal { mean, var } => {
                let d = Normal::new(mean, var.sqrt()).map_err(|e| config!("normal: {e}"))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        Ok(out)
    }
}

/// Draws `n` i.i.d. values. Deterministic for a fixed seed.
pub fn sample_scalar(dist: &ScalarDistribution, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(usage!("sample count must be at least 1"));
    }
    dist.draw(n, &mut rng::stream(seed, "scalar"))
}

/// Field evaluation points along one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldGrid {
    /// `n` equispaced points including both ends.
    Equispaced { lo: f64, hi: f64, n: usize },
    /// `n` cell-centred points `lo + (i + ½)(hi − lo)/n`.
    CellCentred { lo: f64, hi: f64, n: usize },
    Points(Vec<f64>),
}

impl FieldGrid {
    pub fn coords(&self) -> Vec<f64> {
        match self {
            FieldGrid::Equispaced { lo, hi, n } => match *n {
                0 => vec![],
                1 => vec![*lo],
                n => (0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect(),
            },
            FieldGrid::CellCentred { lo, hi, n } => (0..*n)
                .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / *n as f64)
                .collect(),
            FieldGrid::Points(p) => p.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FieldGrid::Equispaced { n, .. } | FieldGrid::CellCentred { n, .. } => *n,
            FieldGrid::Points(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean profile of a field over its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanProfile {
    Constant(f64),
    /// `peak · 4 (y − lo)(hi − y) / (hi − lo)²`
    Parabolic { peak: f64, lo: f64, hi: f64 },
    Values(Vec<f64>),
}

/// Pointwise signal standard deviation `σ_u(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amplitude {
    Constant(f64),
    /// `factor · |mean(y)|`
    RelativeToMean(f64),
    Values(Vec<f64>),
}

/// A discretized Gaussian random field with covariance
/// `σ_u(y)·σ_u(y')·exp(−|y − y'|²/(2ℓ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFieldSpec {
    pub grid: FieldGrid,
    pub mean: MeanProfile,
    pub amplitude: Amplitude,
    pub length_scale: f64,
}

impl RandomFieldSpec {
    /// Stochastic inflow profile of a 2-D channel of height `0.41` with
    /// peak velocity `1.5`, correlation length `0.08·H` and a 12.5 % relative
    /// amplitude, on `n` cell-centred points.
    pub fn channel_inflow(n: usize) -> Self {
        let h = 0.41;
        RandomFieldSpec {
            grid: FieldGrid::CellCentred { lo: 0.0, hi: h, n },
            mean: MeanProfile::Parabolic { peak: 1.5, lo: 0.0, hi: h },
            amplitude: Amplitude::RelativeToMean(0.125),
            length_scale: 0.08 * h,
        }
    }

    /// Mid-plane cut of the bending-wall inflow: channel height `0.5`, peak
    /// `0.05`, correlation length `0.08·h`, 12.5 % relative amplitude.
    pub fn wall_inflow(n: usize) -> Self {
        let h = 0.5;
        RandomFieldSpec {
            grid: FieldGrid::CellCentred { lo: -h / 2.0, hi: h / 2.0, n },
            mean: MeanProfile::Parabolic { peak: 0.05, lo: -h / 2.0, hi: h / 2.0 },
            amplitude: Amplitude::RelativeToMean(0.125),
            length_scale: 0.08 * h,
        }
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn mean_vec(&self) -> Vec<f64> {
        let y = self.grid.coords();
        match &self.mean {
            MeanProfile::Constant(c) => vec![*c; y.len()],
            MeanProfile::Parabolic { peak, lo, hi } => y
                .iter()
                .map(|&v| peak * 4.0 * (v - lo) * (hi - v) / (hi - lo).powi(2))
                .collect(),
            MeanProfile::Values(v) => v.clone(),
        }
    }

    pub fn amplitude_vec(&self) -> Vec<f64> {
        match &self.amplitude {
            Amplitude::Constant(c) => vec![*c; self.n_points()],
            Amplitude::RelativeToMean(f) => self.mean_vec().iter().map(|m| f * m.abs()).collect(),
            Amplitude::Values(v) => v.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_points();
        if n == 0 {
            return Err(config!("random field needs at least one grid point"));
        }
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return Err(config!("field length scale must be > 0, got {}", self.length_scale));
        }
        if let MeanProfile::Values(v) = &self.mean {
            if v.len() != n {
                return Err(config!("mean has {} values for {n} grid points", v.len()));
            }
        }
        if let Amplitude::Values(v) = &self.amplitude {
            if v.len() != n {
                return Err(config!("amplitude has {} values for {n} grid points", v.len()));
            }
        }
        if self.amplitude_vec().iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(config!("amplitude must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `K*[i][j] = σ_u(pᵢ)·σ_u(pⱼ)·exp(−|pᵢ − pⱼ|²/(2ℓ²))`
pub fn field_covariance(spec: &RandomFieldSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let y = spec.grid.coords();
    let amp = spec.amplitude_vec();
    let n = y.len();
    let two_l2 = 2.0 * spec.length_scale * spec.length_scale;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d = y[i] - y[j];
            let v = amp[i] * amp[j] * (-d * d / two_l2).exp();
            if !v.is_finite() {
                return Err(numeric!("field covariance entry ({i}, {j}) is not finite"));
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

fn draw_field(spec: &RandomFieldSpec, n: usize, rng: &mut StreamRng) -> Result<DMatrix<f64>> {
    let k = field_covariance(spec)?;
    let factor = linalg::cholesky_jittered(&k, "field covariance K*")?;
    let mean = DVector::from_vec(spec.mean_vec());
    let m = spec.n_points();
    let mut out = DMatrix::zeros(n, m);
    let mut r = DVector::zeros(m);
    for row in 0..n {
        for v in r.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let g = &factor.l * &r + &mean;
        out.row_mut(row).copy_from(&g.transpose());
    }
    Ok(out)
}

/// `n` realizations `mean + L·r`, `L Lᵀ = K* + jitter·I`, one per row.
pub fn sample_field(spec: &RandomFieldSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(usage!("sample count must be at least 1"));
    }
    draw_field(spec, n, &mut rng::stream(seed, "field"))
}

/// One named column block of the joint input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BlockSpec {
    Scalar { name: String, dist: ScalarDistribution },
    Field { name: String, field: RandomFieldSpec },
}

impl BlockSpec {
    pub fn scalar(name: &str, dist: ScalarDistribution) -> Self {
        BlockSpec::Scalar { name: name.to_string(), dist }
    }

    pub fn field(name: &str, field: RandomFieldSpec) -> Self {
        BlockSpec::Field { name: name.to_string(), field }
    }

    pub fn name(&self) -> &str {
        match self {
            BlockSpec::Scalar { name, .. } | BlockSpec::Field { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            BlockSpec::Scalar { .. } => 1,
            BlockSpec::Field { field, .. } => field.n_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockKind {
    Uncorrelated,
    Field { n_pts: usize },
}

/// Column range occupied by one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub name: String,
    #[serde(flatten)]
    pub kind: BlockKind,
    pub offset: usize,
}

impl BlockLayout {
    pub fn width(&self) -> usize {
        match self.kind {
            BlockKind::Uncorrelated => 1,
            BlockKind::Field { n_pts } => n_pts,
        }
    }

    pub fn columns(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.width()
    }
}

/// `N × d` input realizations, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    pub data: DMatrix<f64>,
    pub layout: Vec<BlockLayout>,
    pub seed: u64,
}

impl SampleMatrix {
    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn block(&self, name: &str) -> Option<&BlockLayout> {
        self.layout.iter().find(|b| b.name == name)
    }

    /// Columns of one block as an `N × width` matrix.
    pub fn block_data(&self, layout: &BlockLayout) -> DMatrix<f64> {
        self.data.columns(layout.offset, layout.width()).into_owned()
    }

    pub fn select_rows(&self, rows: &[usize]) -> SampleMatrix {
        SampleMatrix {
            data: self.data.select_rows(rows),
            layout: self.layout.clone(),
            seed: self.seed,
        }
    }

    /// Column headers `block:name:index`.
    pub fn header(&self) -> Vec<String> {
        let mut h = Vec::with_capacity(self.dim());
        for b in &self.layout {
            let tag = match b.kind {
                BlockKind::Uncorrelated => "uncorrelated",
                BlockKind::Field { .. } => "field",
            };
            for i in 0..b.width() {
                h.push(format!("{tag}:{}:{i}", b.name));
            }
        }
        h
    }

    pub(crate) fn check_layout(&self) -> Result<()> {
        let mut offset = 0;
        for b in &self.layout {
            if b.offset != offset {
                return Err(usage!("block {} starts at column {} (expected {offset})", b.name, b.offset));
            }
            offset += b.width();
        }
        if offset != self.dim() {
            return Err(usage!("block widths sum to {offset}, matrix has {} columns", self.dim()));
        }
        Ok(())
    }
}

/// Fills every block independently from its own named random stream.
pub fn assemble_samples(blocks: &[BlockSpec], n: usize, seed: u64) -> Result<SampleMatrix> {
    if blocks.is_empty() {
        return Err(usage!("at least one input block is required"));
    }
    if n == 0 {
        return Err(usage!("sample count must be at least 1"));
    }
    for (i, b) in blocks.iter().enumerate() {
        if blocks[..i].iter().any(|o| o.name() == b.name()) {
            return Err(config!("duplicate input block name {:?}", b.name()));
        }
    }
    let d: usize = blocks.iter().map(BlockSpec::width).sum();
    let mut data = DMatrix::zeros(n, d);
    let mut layout = Vec::with_capacity(blocks.len());
    let mut offset = 0;
    for block in blocks {
        let mut rng = rng::stream(seed, block.name());
        match block {
            BlockSpec::Scalar { name, dist } => {
                let v = dist.draw(n, &mut rng)?;
                data.column_mut(offset).copy_from_slice(&v);
                layout.push(BlockLayout {
                    name: name.clone(),
                    kind: BlockKind::Uncorrelated,
                    offset,
                });
            }
            BlockSpec::Field { name, field } => {
                let f = draw_field(field, n, &mut rng)?;
                data.columns_mut(offset, f.ncols()).copy_from(&f);
                layout.push(BlockLayout {
                    name: name.clone(),
                    kind: BlockKind::Field { n_pts: f.ncols() },
                    offset,
                });
            }
        }
        offset += block.width();
    }
    Ok(SampleMatrix { data, layout, seed })
}
