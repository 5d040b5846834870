//! End-to-end estimation: sample inputs, run LF, build features, select and
//! run HF training points, fit the GP, compute posterior density statistics.
//!
//! The same steps run either in memory ([`run_pipeline`]) or as resumable
//! stages persisting artifacts into an output directory ([`run_stage`]).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, hash_file, hash_json, Manifest, VERSION};
use crate::bmfmc::{self, DensityPrediction, SupportGrid};
use crate::dimreduce::{reduce_inputs, KleSettings, Reduction};
use crate::error::{config, usage, Error, Result};
use crate::features::{
    assemble_training_set, build_feature_space, rank_features, select_diverse_subset, FeatureSpace, TrainingSet,
    DEFAULT_N_GAMMA, DEFAULT_N_GAMMA_PLUS,
};
use crate::gp::{self, FitOptions, GaussianProcessModel, KernelParams, MeanMode};
use crate::harness::{self, Family, Fidelity, Harness};
use crate::inputs::{assemble_samples, BlockKind, BlockLayout, BlockSpec, SampleMatrix};
use crate::metrics::{self, BandwidthMode, MetricRecord};

/// Where model outputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    Harness(Family),
    /// Precomputed outputs: `y_lf` holds a `y_lf` column in sample order,
    /// `y_hf` holds `index,y_hf` rows for (at least) the selected samples.
    External { y_lf: PathBuf, y_hf: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSpec {
    #[serde(default = "default_support_points")]
    pub points: usize,
    #[serde(default = "default_support_pad")]
    pub pad: f64,
    /// Explicit bounds; both or neither.
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
}

fn default_support_points() -> usize {
    bmfmc::DEFAULT_SUPPORT_POINTS
}
fn default_support_pad() -> f64 {
    bmfmc::DEFAULT_SUPPORT_PAD
}

impl Default for SupportSpec {
    fn default() -> Self {
        SupportSpec {
            points: default_support_points(),
            pad: default_support_pad(),
            lo: None,
            hi: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    pub n_ref: usize,
    pub seed: u64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            n_ref: harness::REFERENCE_SAMPLES,
            seed: harness::REFERENCE_SEED,
        }
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    /// Input blocks. Defaults to the harness family's own inputs; required
    /// for external models.
    #[serde(default)]
    pub inputs: Option<Vec<BlockSpec>>,
    #[serde(default = "d_n_sample")]
    pub n_sample: usize,
    #[serde(default = "d_n_train")]
    pub n_train: usize,
    #[serde(default = "d_n_gamma")]
    pub n_gamma: usize,
    #[serde(default = "d_n_gamma_plus")]
    pub n_gamma_plus: usize,
    #[serde(default = "d_n_variance")]
    pub n_variance: usize,
    #[serde(default)]
    pub support: SupportSpec,
    #[serde(default)]
    pub kde: BandwidthMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub mean_mode: MeanMode,
    #[serde(default)]
    pub per_dimension_scales: bool,
    #[serde(default)]
    pub kle: KleSettings,
    #[serde(default)]
    pub reference: ReferenceSpec,
}

fn d_n_sample() -> usize {
    10_000
}
fn d_n_train() -> usize {
    50
}
fn d_n_gamma() -> usize {
    DEFAULT_N_GAMMA
}
fn d_n_gamma_plus() -> usize {
    DEFAULT_N_GAMMA_PLUS
}
fn d_n_variance() -> usize {
    bmfmc::DEFAULT_N_VARIANCE
}
fn d_restarts() -> usize {
    8
}

impl RunConfig {
    /// Defaults around a harness family.
    pub fn harness(family: Family) -> Self {
        RunConfig {
            model: ModelSource::Harness(family),
            inputs: None,
            n_sample: d_n_sample(),
            n_train: d_n_train(),
            n_gamma: d_n_gamma(),
            n_gamma_plus: d_n_gamma_plus(),
            n_variance: d_n_variance(),
            support: SupportSpec::default(),
            kde: BandwidthMode::default(),
            seed: 0,
            restarts: d_restarts(),
            mean_mode: MeanMode::default(),
            per_dimension_scales: false,
            kle: KleSettings::default(),
            reference: ReferenceSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config!("{e}"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => config!("{}: {m}", path.display()),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sample < 2 {
            return Err(config!("n_sample must be at least 2"));
        }
        if self.n_train < 2 {
            return Err(config!("n_train must be at least 2"));
        }
        if self.n_train * 10 > self.n_sample {
            return Err(config!(
                "n_train ({}) must not exceed n_sample/10 ({})",
                self.n_train,
                self.n_sample / 10
            ));
        }
        if self.n_gamma > self.n_gamma_plus {
            return Err(config!("n_gamma ({}) exceeds n_gamma_plus ({})", self.n_gamma, self.n_gamma_plus));
        }
        if self.n_gamma_plus == 0 || self.n_variance == 0 || self.restarts == 0 {
            return Err(config!("n_gamma_plus, n_variance and restarts must be positive"));
        }
        if self.support.points < 2 || !(self.support.pad >= 0.0) {
            return Err(config!("support needs >= 2 points and a non-negative pad"));
        }
        match (self.support.lo, self.support.hi) {
            (None, None) => {}
            (Some(lo), Some(hi)) if lo < hi => {}
            _ => return Err(config!("support lo/hi must both be given with lo < hi")),
        }
        if self.reference.n_ref < 2 {
            return Err(config!("reference n_ref must be at least 2"));
        }
        if let ModelSource::Harness(f) = &self.model {
            f.validate()?;
        }
        let blocks = self.input_blocks()?;
        for b in &blocks {
            match b {
                BlockSpec::Scalar { dist, .. } => dist.validate()?,
                BlockSpec::Field { field, .. } => field.validate()?,
            }
        }
        Ok(())
    }

    /// Input blocks in effect.
    pub fn input_blocks(&self) -> Result<Vec<BlockSpec>> {
        match (&self.model, &self.inputs) {
            (_, Some(b)) if b.is_empty() => Err(config!("inputs must not be empty")),
            (ModelSource::Harness(f), Some(b)) => {
                let d: usize = b.iter().map(BlockSpec::width).sum();
                if d != f.input_dim() {
                    return Err(config!("{} needs {} input columns, inputs give {d}", f.name(), f.input_dim()));
                }
                Ok(b.clone())
            }
            (ModelSource::Harness(f), None) => Ok(f.inputs()),
            (ModelSource::External { .. }, Some(b)) => Ok(b.clone()),
            (ModelSource::External { .. }, None) => Err(config!("external models need an explicit inputs list")),
        }
    }

    fn family(&self) -> Option<&Family> {
        match &self.model {
            ModelSource::Harness(f) => Some(f),
            ModelSource::External { .. } => None,
        }
    }
}

/// Reduced inputs and LF features for all samples.
#[derive(Debug, Clone)]
pub struct Features {
    pub reduction: Reduction,
    pub space: FeatureSpace,
}

/// KLE reduction, ranking, and the feature space. `n_gamma_plus` (and with
/// it `n_gamma`) is capped at the number of usable reduced columns.
pub fn build_features(cfg: &RunConfig, samples: &SampleMatrix, y_lf: &[f64]) -> Result<Features> {
    let blocks = cfg.input_blocks()?;
    let reduction = reduce_inputs(samples, &blocks, cfg.kle)?;
    let ranking = rank_features(&reduction.reduced, y_lf, false)?;
    let available = ranking.eligible.iter().filter(|&&e| e).count();
    let n_gamma_plus = cfg.n_gamma_plus.min(available);
    let n_gamma = cfg.n_gamma.min(n_gamma_plus);
    if n_gamma_plus < cfg.n_gamma_plus {
        log::warn!("only {available} usable reduced columns; n_gamma_plus capped at {n_gamma_plus}");
    }
    let space = build_feature_space(&ranking, &reduction.reduced, y_lf, n_gamma, n_gamma_plus)?;
    Ok(Features { reduction, space })
}

/// Space-filling training rows in the `γ⁺` coordinates.
pub fn select_training(cfg: &RunConfig, features: &FeatureSpace) -> Result<Vec<usize>> {
    if features.gamma_plus.ncols() == 0 {
        return Err(usage!("no usable input features to select training points from"));
    }
    select_diverse_subset(&features.gamma_plus, cfg.n_train)
}

pub fn fit_model(cfg: &RunConfig, training: &TrainingSet) -> Result<GaussianProcessModel> {
    gp::fit(
        &training.z_lf,
        &training.y_hf,
        cfg.mean_mode,
        FitOptions {
            restarts: cfg.restarts,
            seed: cfg.seed,
            per_dimension_scales: cfg.per_dimension_scales,
        },
    )
}

/// Configured support, or one covering all LF outputs and HF training values.
pub fn support_for(cfg: &RunConfig, y_lf: &[f64], y_hf: &[f64]) -> Result<SupportGrid> {
    match (cfg.support.lo, cfg.support.hi) {
        (Some(lo), Some(hi)) => SupportGrid::equispaced(lo, hi, cfg.support.points),
        _ => {
            let pooled: Vec<f64> = y_lf.iter().chain(y_hf).copied().collect();
            SupportGrid::covering(&pooled, cfg.support.points, cfg.support.pad)
        }
    }
}

/// Everything an in-memory run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub samples: SampleMatrix,
    pub y_lf: Vec<f64>,
    pub features: Features,
    pub training: TrainingSet,
    pub model: GaussianProcessModel,
    pub prediction: DensityPrediction,
    /// Number of HF evaluations spent.
    pub hf_calls: usize,
}

/// Runs every step in memory on a harness family.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let family = cfg
        .family()
        .ok_or_else(|| usage!("in-memory runs need a harness model; use the staged runner for external outputs"))?;
    let harness = Harness::new(family.clone())?;
    let samples = assemble_samples(&cfg.input_blocks()?, cfg.n_sample, cfg.seed)?;
    let y_lf = harness.evaluate(Fidelity::Low, &samples.data)?;
    run_with(cfg, samples, y_lf, |rows| harness.evaluate(Fidelity::High, &rows.data))
        .map(|mut out| {
            out.hf_calls = harness.hf_budget_used();
            out
        })
}

/// Runs from given samples and LF outputs; `hf` is called exactly once, on
/// the selected rows.
pub fn run_with<F>(cfg: &RunConfig, samples: SampleMatrix, y_lf: Vec<f64>, hf: F) -> Result<RunOutput>
where
    F: FnOnce(&SampleMatrix) -> Result<Vec<f64>>,
{
    let features = build_features(cfg, &samples, &y_lf)?;
    let idx = select_training(cfg, &features.space)?;
    let chosen = samples.select_rows(&idx);
    let y_hf = hf(&chosen)?;
    let training = assemble_training_set(&samples, &features.space, &idx, &y_hf)?;
    let model = fit_model(cfg, &training)?;
    let support = support_for(cfg, &y_lf, &training.y_hf)?;
    let prediction = bmfmc::posterior_statistics(&model, &features.space.z_matrix, &support, cfg.n_variance)?;
    Ok(RunOutput {
        samples,
        y_lf,
        features,
        training,
        model,
        prediction,
        hf_calls: idx.len(),
    })
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Sample,
    Lf,
    Select,
    Fit,
    Predict,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Sample, Stage::Lf, Stage::Select, Stage::Fit, Stage::Predict, Stage::Metrics];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Lf => "lf",
            Stage::Select => "select",
            Stage::Fit => "fit",
            Stage::Predict => "predict",
            Stage::Metrics => "metrics",
        }
    }

    fn previous(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self).unwrap();
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

pub mod files {
    pub const SAMPLES: &str = "samples.csv";
    pub const LAYOUT: &str = "samples.json";
    pub const Y_LF: &str = "y_lf.csv";
    pub const FEATURES: &str = "features.csv";
    pub const FEATURES_META: &str = "features.json";
    pub const HF_REQUESTS: &str = "hf_requests.csv";
    pub const TRAINING: &str = "training.csv";
    pub const MODEL: &str = "gp.json";
    pub const DENSITY: &str = "density.json";
    pub const PLOT: &str = "plot.csv";
    pub const REFERENCE: &str = "reference.csv";
    pub const METRICS: &str = "metrics.json";
    pub const LEDGER: &str = "metrics.jsonl";
}

/// Chained per-stage configuration hashes: each covers its own settings and
/// every earlier stage's.
pub fn stage_hashes(cfg: &RunConfig) -> Result<BTreeMap<Stage, String>> {
    let blocks = cfg.input_blocks()?;
    let own = |s: Stage| -> serde_json::Value {
        match s {
            Stage::Sample => serde_json::json!({"inputs": blocks, "n_sample": cfg.n_sample, "seed": cfg.seed}),
            Stage::Lf => serde_json::json!({"model": cfg.model}),
            Stage::Select => serde_json::json!({
                "n_train": cfg.n_train, "n_gamma": cfg.n_gamma, "n_gamma_plus": cfg.n_gamma_plus, "kle": cfg.kle
            }),
            Stage::Fit => serde_json::json!({
                "restarts": cfg.restarts, "mean_mode": cfg.mean_mode,
                "per_dimension_scales": cfg.per_dimension_scales, "seed": cfg.seed
            }),
            Stage::Predict => serde_json::json!({
                "support": cfg.support, "n_variance": cfg.n_variance, "reference": cfg.reference
            }),
            Stage::Metrics => serde_json::json!({"kde": cfg.kde}),
        }
    };
    let mut out = BTreeMap::new();
    let mut prev = String::new();
    for s in Stage::ALL {
        let h = hash_json(&serde_json::json!({"previous": prev, "stage": s.name(), "settings": own(s), "version": VERSION}));
        out.insert(s, h.clone());
        prev = h;
    }
    Ok(out)
}

/// Layout and provenance stored next to the sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub layout: Vec<BlockLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub version: String,
    pub config_hash: String,
    pub n_gamma: usize,
    pub n_gamma_plus: usize,
    /// `block:index` of every `γ⁺` coordinate; the first `n_gamma` enter `z_LF`.
    pub gamma_plus: Vec<String>,
    pub kle_modes: BTreeMap<String, usize>,
    pub kle_explained: BTreeMap<String, f64>,
    pub selected: Vec<usize>,
    pub hf_calls: usize,
}

/// Persisted GP: hyperparameters plus a hash of the training file it was
/// conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: String,
    pub config_hash: String,
    pub params: KernelParams,
    pub mean_mode: MeanMode,
    pub training_file: String,
    pub training_hash: String,
    pub jitter: f64,
    pub log_marginal_likelihood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityArtifact {
    pub version: String,
    pub config_hash: String,
    pub n_train: usize,
    pub n_gamma: usize,
    pub n_gamma_plus: usize,
    pub seed: u64,
    pub reference_seed: Option<u64>,
    pub model_hash: String,
    pub features_hash: String,
    #[serde(flatten)]
    pub prediction: DensityPrediction,
}

/// Whether a stage ran or was already up to date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    hashes: BTreeMap<Stage, String>,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// The predecessor's manifest, checked against the current configuration
    /// and the files on disk.
    fn require(&self, stage: Stage) -> Result<Manifest> {
        let mp = artifacts::manifest_path(self.dir, stage.name());
        let missing = |reason: &str| Error::MissingArtifact {
            stage: stage.name(),
            path: mp.clone(),
            reason: reason.to_string(),
        };
        let m = Manifest::load(self.dir, stage.name())?.ok_or_else(|| missing("not found"))?;
        if m.config_hash != self.hashes[&stage] {
            return Err(missing("stale: configuration changed since it ran"));
        }
        if !m.outputs_intact(self.dir) {
            return Err(missing("stale: its outputs were modified or deleted"));
        }
        Ok(m)
    }

    fn hashes_of(&self, names: &[&str]) -> Result<BTreeMap<String, String>> {
        names
            .iter()
            .map(|n| Ok((n.to_string(), hash_file(&self.path(n))?)))
            .collect()
    }
}

fn external_input(path: &Path, what: &'static str) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: what,
            path: path.to_path_buf(),
            reason: "external model output file not found".into(),
        });
    }
    Ok(path.to_path_buf())
}

/// Runs one stage in `dir`, skipping it when its manifest shows unchanged
/// configuration, unchanged inputs and intact outputs (unless `force`).
pub fn run_stage(cfg: &RunConfig, stage: Stage, dir: &Path, force: bool) -> Result<StageOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ctx = Ctx {
        cfg,
        dir,
        hashes: stage_hashes(cfg)?,
    };
    let mut inputs = match stage.previous() {
        Some(p) => ctx.require(p)?.outputs,
        None => BTreeMap::new(),
    };
    if let ModelSource::External { y_lf, y_hf } = &cfg.model {
        match stage {
            Stage::Lf => {
                let p = external_input(y_lf, "the external LF model")?;
                inputs.insert(format!("external:{}", p.display()), hash_file(&p)?);
            }
            // a missing HF file still lets the stage write its request list
            Stage::Select if y_hf.exists() => {
                inputs.insert(format!("external:{}", y_hf.display()), hash_file(y_hf)?);
            }
            _ => {}
        }
    }
    if !force {
        if let Some(m) = Manifest::load(dir, stage.name())? {
            if m.config_hash == ctx.hashes[&stage] && m.inputs == inputs && m.outputs_intact(dir) {
                log::info!("{}: up to date", stage.name());
                return Ok(StageOutcome::UpToDate);
            }
        }
    }
    let outputs = match stage {
        Stage::Sample => stage_sample(&ctx)?,
        Stage::Lf => stage_lf(&ctx)?,
        Stage::Select => stage_select(&ctx)?,
        Stage::Fit => stage_fit(&ctx)?,
        Stage::Predict => stage_predict(&ctx)?,
        Stage::Metrics => stage_metrics(&ctx)?,
    };
    Manifest {
        stage: stage.name().to_string(),
        version: VERSION.to_string(),
        config_hash: ctx.hashes[&stage].clone(),
        inputs,
        outputs: ctx.hashes_of(&outputs)?,
    }
    .save(dir)?;
    Ok(StageOutcome::Ran)
}

/// Runs all stages in order.
pub fn run_all(cfg: &RunConfig, dir: &Path, force: bool) -> Result<Vec<(Stage, StageOutcome)>> {
    Stage::ALL
        .iter()
        .map(|&s| run_stage(cfg, s, dir, force).map(|o| (s, o)))
        .collect()
}

fn load_samples(ctx: &Ctx) -> Result<SampleMatrix> {
    let meta: SampleMeta = artifacts::read_json(&ctx.path(files::LAYOUT))?;
    let (_, data) = artifacts::read_matrix_csv(&ctx.path(files::SAMPLES))?;
    let s = SampleMatrix {
        data,
        layout: meta.layout,
        seed: meta.seed,
    };
    s.check_layout().map_err(|e| Error::format(ctx.path(files::SAMPLES), e))?;
    Ok(s)
}

fn load_y_lf(ctx: &Ctx, n: usize) -> Result<Vec<f64>> {
    let y = artifacts::read_column_csv(&ctx.path(files::Y_LF), "y_lf")?;
    if y.len() != n {
        return Err(Error::format(ctx.path(files::Y_LF), format!("{} LF values for {n} samples", y.len())));
    }
    Ok(y)
}

fn stage_sample(ctx: &Ctx) -> Result<Vec<&'static str>> {
    let s = assemble_samples(&ctx.cfg.input_blocks()?, ctx.cfg.n_sample, ctx.cfg.seed)?;
    artifacts::write_matrix_csv(&ctx.path(files::SAMPLES), &s.header(), &s.data)?;
    artifacts::write_json(
        &ctx.path(files::LAYOUT),
        &SampleMeta {
            version: VERSION.into(),
            config_hash: ctx.hashes[&Stage::Sample].clone(),
            seed: s.seed,
            layout: s.layout,
        },
    )?;
    Ok(vec![files::SAMPLES, files::LAYOUT])
}

fn stage_lf(ctx: &Ctx) -> Result<Vec<&'static str>> {
    let samples = load_samples(ctx)?;
    let y = match &ctx.cfg.model {
        ModelSource::Harness(f) => Harness::new(f.clone())?.evaluate(Fidelity::Low, &samples.data)?,
        ModelSource::External { y_lf, .. } => {
            let y = artifacts::read_column_csv(y_lf, "y_lf")?;
            if y.len() != samples.n_samples() {
                return Err(Error::format(
                    y_lf,
                    format!("{} LF values for {} samples", y.len(), samples.n_samples()),
                ));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(y_lf, "LF outputs must be finite"));
            }
            y
        }
    };
    artifacts::write_columns_csv(&ctx.path(files::Y_LF), &["y_lf"], &[&y])?;
    Ok(vec![files::Y_LF])
}

fn feature_header(space: &FeatureSpace) -> Vec<String> {
    let mut h = vec!["y_lf".to_string()];
    h.extend((1..=space.n_gamma).map(|k| format!("gamma{k}")));
    h.extend(space.provenance.iter().map(|p| format!("plus:{p}")));
    h
}

fn feature_matrix(space: &FeatureSpace) -> DMatrix<f64> {
    let n = space.z_matrix.nrows();
    let (a, b) = (space.z_matrix.ncols(), space.gamma_plus.ncols());
    DMatrix::from_fn(n, a + b, |r, c| if c < a { space.z_matrix[(r, c)] } else { space.gamma_plus[(r, c - a)] })
}

/// Reads `index,y_hf` rows and returns values for `wanted`, in that order.
fn external_hf(path: &Path, wanted: &[usize]) -> Result<std::result::Result<Vec<f64>, Vec<usize>>> {
    if !path.exists() {
        return Ok(Err(wanted.to_vec()));
    }
    let (header, m) = artifacts::read_matrix_csv(path)?;
    let ci = header.iter().position(|h| h == "index");
    let cy = header.iter().position(|h| h == "y_hf");
    let (Some(ci), Some(cy)) = (ci, cy) else {
        return Err(Error::format(path, "expected columns index,y_hf"));
    };
    let mut known = BTreeMap::new();
    for r in 0..m.nrows() {
        let i = m[(r, ci)];
        if i < 0.0 || i.fract() != 0.0 {
            return Err(Error::format(path, format!("row {}: index {i} is not a sample index", r + 1)));
        }
        known.insert(i as usize, m[(r, cy)]);
    }
    let missing: Vec<usize> = wanted.iter().copied().filter(|i| !known.contains_key(i)).collect();
    if !missing.is_empty() {
        return Ok(Err(missing));
    }
    Ok(Ok(wanted.iter().map(|i| known[i]).collect()))
}

fn stage_select(ctx: &Ctx) -> Result<Vec<&'static str>> {
    let cfg = ctx.cfg;
    let samples = load_samples(ctx)?;
    let y_lf = load_y_lf(ctx, samples.n_samples())?;
    let features = build_features(cfg, &samples, &y_lf)?;
    let idx = select_training(cfg, &features.space)?;
    let requests = DMatrix::from_fn(idx.len(), 1, |r, _| idx[r] as f64);
    artifacts::write_matrix_csv(&ctx.path(files::HF_REQUESTS), &["index".to_string()], &requests)?;
    let (y_hf, hf_calls) = match &cfg.model {
        ModelSource::Harness(f) => {
            let h = Harness::new(f.clone())?;
            let y = h.evaluate(Fidelity::High, &samples.select_rows(&idx).data)?;
            (y, h.hf_budget_used())
        }
        ModelSource::External { y_hf, .. } => match external_hf(y_hf, &idx)? {
            Ok(y) => (y, 0),
            Err(missing) => {
                return Err(Error::MissingArtifact {
                    stage: "the external HF model",
                    path: y_hf.clone(),
                    reason: format!(
                        "{} of {} selected samples have no HF value (first: {}); the full list is in {}",
                        missing.len(),
                        idx.len(),
                        missing[0],
                        ctx.path(files::HF_REQUESTS).display()
                    ),
                })
            }
        },
    };
    if y_hf.iter().any(|v| !v.is_finite()) {
        return Err(usage!("HF outputs must be finite"));
    }
    let training = assemble_training_set(&samples, &features.space, &idx, &y_hf)?;

    artifacts::write_matrix_csv(&ctx.path(files::FEATURES), &feature_header(&features.space), &feature_matrix(&features.space))?;
    let mut header = vec!["index".to_string()];
    header.extend((0..training.z_lf.ncols()).map(|k| format!("z{k}")));
    header.push("y_hf".into());
    let tm = DMatrix::from_fn(training.len(), training.z_lf.ncols() + 2, |r, c| {
        if c == 0 {
            training.indices[r] as f64
        } else if c <= training.z_lf.ncols() {
            training.z_lf[(r, c - 1)]
        } else {
            training.y_hf[r]
        }
    });
    artifacts::write_matrix_csv(&ctx.path(files::TRAINING), &header, &tm)?;
    let bases = &features.reduction.bases;
    artifacts::write_json(
        &ctx.path(files::FEATURES_META),
        &FeatureMeta {
            version: VERSION.into(),
            config_hash: ctx.hashes[&Stage::Select].clone(),
            n_gamma: features.space.n_gamma,
            n_gamma_plus: features.space.n_gamma_plus,
            gamma_plus: features.space.provenance.iter().map(|p| p.to_string()).collect(),
            kle_modes: bases.iter().map(|(n, b)| (n.clone(), b.n_trunc)).collect(),
            kle_explained: bases.iter().map(|(n, b)| (n.clone(), b.explained)).collect(),
            selected: idx,
            hf_calls,
        },
    )?;
    Ok(vec![files::FEATURES, files::FEATURES_META, files::HF_REQUESTS, files::TRAINING])
}

/// Training indices, `Z`, and `Y_HF` from the training CSV.
fn load_training(ctx: &Ctx) -> Result<(Vec<usize>, DMatrix<f64>, Vec<f64>)> {
    let (header, m) = artifacts::read_matrix_csv(&ctx.path(files::TRAINING))?;
    let w = header.len();
    if w < 3 || header[0] != "index" || header[w - 1] != "y_hf" {
        return Err(Error::format(ctx.path(files::TRAINING), "expected index,z0..,y_hf columns"));
    }
    let idx = m.column(0).iter().map(|v| *v as usize).collect();
    let z = m.columns(1, w - 2).into_owned();
    let y = m.column(w - 1).iter().copied().collect();
    Ok((idx, z, y))
}

fn load_model(ctx: &Ctx) -> Result<(GaussianProcessModel, ModelArtifact)> {
    let art: ModelArtifact = artifacts::read_json(&ctx.path(files::MODEL))?;
    let (_, z, y) = load_training(ctx)?;
    let model = GaussianProcessModel::condition(art.params.clone(), art.mean_mode, z, y)?;
    Ok((model, art))
}

fn stage_fit(ctx: &Ctx) -> Result<Vec<&'static str>> {
    let cfg = ctx.cfg;
    let (_, z, y) = load_training(ctx)?;
    let model = gp::fit(
        &z,
        &y,
        cfg.mean_mode,
        FitOptions {
            restarts: cfg.restarts,
            seed: cfg.seed,
            per_dimension_scales: cfg.per_dimension_scales,
        },
    )?;
    artifacts::write_json(
        &ctx.path(files::MODEL),
        &ModelArtifact {
            version: VERSION.into(),
            config_hash: ctx.hashes[&Stage::Fit].clone(),
            params: model.params.clone(),
            mean_mode: model.mean_mode,
            training_file: files::TRAINING.into(),
            training_hash: hash_file(&ctx.path(files::TRAINING))?,
            jitter: model.jitter(),
            log_marginal_likelihood: model.log_marginal_likelihood,
        },
    )?;
    Ok(vec![files::MODEL])
}

fn stage_predict(ctx: &Ctx) -> Result<Vec<&'static str>> {
    let cfg = ctx.cfg;
    let (model, _) = load_model(ctx)?;
    let (header, fm) = artifacts::read_matrix_csv(&ctx.path(files::FEATURES))?;
    let width = 1 + header.iter().filter(|h| h.starts_with("gamma")).count();
    let z = fm.columns(0, width).into_owned();
    let y_lf: Vec<f64> = z.column(0).iter().copied().collect();
    let (_, _, y_hf) = load_training(ctx)?;
    let support = support_for(cfg, &y_lf, &y_hf)?;
    let prediction = bmfmc::posterior_statistics(&model, &z, &support, cfg.n_variance)?;

    let reference = match cfg.family() {
        Some(f) => Some(harness::reference_density(f, cfg.reference.n_ref, cfg.reference.seed, &support)?),
        None => None,
    };
    let meta: FeatureMeta = artifacts::read_json(&ctx.path(files::FEATURES_META))?;
    let density = DensityArtifact {
        version: VERSION.into(),
        config_hash: ctx.hashes[&Stage::Predict].clone(),
        n_train: y_hf.len(),
        n_gamma: meta.n_gamma,
        n_gamma_plus: meta.n_gamma_plus,
        seed: cfg.seed,
        reference_seed: reference.as_ref().map(|_| cfg.reference.seed),
        model_hash: hash_file(&ctx.path(files::MODEL))?,
        features_hash: hash_file(&ctx.path(files::FEATURES))?,
        prediction,
    };
    artifacts::write_json(&ctx.path(files::DENSITY), &density)?;

    let p = &density.prediction;
    let (lower, upper) = p.credible_band();
    let mut names = vec!["support", "mean", "lower", "upper"];
    let mut cols: Vec<&[f64]> = vec![p.support.points(), &p.mean, &lower, &upper];
    if let Some(r) = &reference {
        names.push("reference");
        cols.push(r);
    }
    artifacts::write_columns_csv(&ctx.path(files::PLOT), &names, &cols)?;
    let mut out = vec![files::DENSITY, files::PLOT];
    if let Some(r) = &reference {
        artifacts::write_columns_csv(&ctx.path(files::REFERENCE), &["support", "reference"], &[p.support.points(), r])?;
        out.push(files::REFERENCE);
    }
    Ok(out)
}

/// Summary written by the metrics stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub version: String,
    pub config_hash: String,
    pub records: Vec<MetricRecord>,
}

fn stage_metrics(ctx: &Ctx) -> Result<Vec<&'static str>> {
    let cfg = ctx.cfg;
    let density: DensityArtifact = artifacts::read_json(&ctx.path(files::DENSITY))?;
    let p = &density.prediction;
    let inputs_hash = hash_file(&ctx.path(files::DENSITY))?;
    let samples = load_samples(ctx)?;
    let y_lf = load_y_lf(ctx, samples.n_samples())?;
    let rec = |metric: &str, value: f64| MetricRecord {
        metric: metric.into(),
        value,
        inputs_hash: inputs_hash.clone(),
    };

    let n = y_lf.len() as f64;
    let m = y_lf.iter().sum::<f64>() / n;
    let sd = (y_lf.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = metrics::mc_standard_error(sd, y_lf.len());
    let mode = p.mode_index();
    let (lower, upper) = p.credible_band();
    let mut records = vec![
        rec("mean_integral", p.support.integrate(&p.mean)),
        rec("variance_floor", p.variance_floor),
        rec("band_halfwidth_over_mean_at_mode", 0.5 * (upper[mode] - lower[mode]) / p.mean[mode]),
        rec("lf_mc_standard_error", se),
        rec("lf_mc_relative_error", if sd > 0.0 { se / sd } else { 0.0 }),
    ];
    let ref_path = ctx.path(files::REFERENCE);
    if ref_path.exists() {
        let reference = artifacts::read_column_csv(&ref_path, "reference")?;
        records.push(rec("kld_reference_vs_mean", metrics::kld(&reference, &p.mean, &p.support)?));
        let lf_kde = metrics::kde_fit(&y_lf, cfg.kde)?.evaluate(&p.support);
        records.push(rec("kld_reference_vs_lf_kde", metrics::kld(&reference, &lf_kde, &p.support)?));
    }
    artifacts::write_json(
        &ctx.path(files::METRICS),
        &MetricsSummary {
            version: VERSION.into(),
            config_hash: ctx.hashes[&Stage::Metrics].clone(),
            records: records.clone(),
        },
    )?;
    metrics::append_records(&ctx.path(files::LEDGER), &records)?;
    Ok(vec![files::METRICS])
}

/// Sample layout for a set of blocks, without drawing anything.
pub fn layout_of(blocks: &[BlockSpec]) -> Vec<BlockLayout> {
    let mut offset = 0;
    blocks
        .iter()
        .map(|b| {
            let kind = match b {
                BlockSpec::Scalar { .. } => BlockKind::Uncorrelated,
                BlockSpec::Field { field, .. } => BlockKind::Field { n_pts: field.n_points() },
            };
            let l = BlockLayout {
                name: b.name().to_string(),
                kind,
                offset,
            };
            offset += b.width();
            l
        })
        .collect()
}
