//! Run orchestration: many episodes, accuracy aggregation with a 95%
//! interval, ablation toggles, and parameter sweeps.
//!
//! Runs are embarrassingly parallel. Each run derives its own episode seed
//! from the global seed and its run index, so results are independent of
//! worker count and scheduling; per-run accuracies are reduced in run-index
//! order, making summaries bit-identical across thread counts. Sweeps reuse
//! the same global seed for every parameter value, pairing runs across
//! values to cut comparison variance.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::classifiers::{
    ncm_barycenters, ncm_predict, soft_kmeans_predict, ClassifierError, SoftKMeansConfig,
};
use crate::feature_store::{ensemble_compatibility, FeatureBank, FeatureVector};
use crate::preprocessing::{
    MeanAccumulator, MeanSource, Mode, PreprocessError, PreprocessStats, StepConfig, ViewPolicy,
    compose_image_vector, preprocess_task,
};
use crate::sampler::{
    derive_run_seed, materialize, sample_imbalanced_task_indices, sample_task_indices,
    ImbalanceSpec, SampleError, Task,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible feature banks: {0}")]
    IncompatibleBanks(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// How queries are drawn: a fixed count per class, or a Dirichlet-split
/// total with hidden per-class counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryProtocol {
    PerClass(usize),
    Imbalanced(ImbalanceSpec),
}

impl QueryProtocol {
    /// Total queries per run (exact in both protocols).
    pub fn total(&self, ways: usize) -> usize {
        match self {
            QueryProtocol::PerClass(q) => q * ways,
            QueryProtocol::Imbalanced(spec) => spec.q_total,
        }
    }
}

/// Full evaluation configuration: which pipeline steps run, the episode
/// shape, classifier knobs, and the Monte Carlo budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// AS: average each image's views (false = first view only).
    pub use_view_average: bool,
    /// E: concatenate vectors across all supplied banks.
    pub use_ensemble: bool,
    /// C: subtract the centering mean.
    pub use_center: bool,
    /// H: project onto the unit hypersphere.
    pub use_normalize: bool,
    pub ways: usize,
    pub shots: usize,
    pub queries: QueryProtocol,
    pub beta: f64,
    pub max_iters: usize,
    pub shift_tol: f64,
    /// Cap on how many leading views AS averages; `None` uses all.
    pub views: Option<usize>,
    pub n_runs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let skm = SoftKMeansConfig::default();
        Self {
            mode: Mode::Inductive,
            use_view_average: true,
            use_ensemble: false,
            use_center: true,
            use_normalize: true,
            ways: 5,
            shots: 1,
            queries: QueryProtocol::PerClass(15),
            beta: skm.beta,
            max_iters: skm.max_iters,
            shift_tol: skm.shift_tol,
            views: None,
            n_runs: 10_000,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Method label derived from the AS and E toggles.
    pub fn method_name(&self) -> &'static str {
        match (self.use_view_average, self.use_ensemble) {
            (true, true) => "EASY",
            (true, false) => "ASY",
            (false, true) => "EY",
            (false, false) => "Y",
        }
    }

    pub fn soft_kmeans(&self) -> SoftKMeansConfig {
        SoftKMeansConfig {
            beta: self.beta,
            max_iters: self.max_iters,
            shift_tol: self.shift_tol,
        }
    }

    fn view_policy(&self) -> ViewPolicy {
        ViewPolicy {
            average: self.use_view_average,
            max_views: self.views,
        }
    }

    fn step_config(&self) -> StepConfig {
        StepConfig {
            mode: self.mode,
            center: self.use_center,
            normalize: self.use_normalize,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.ways < 2 {
            return Err(EvalError::Config(format!(
                "ways must be at least 2, got {}",
                self.ways
            )));
        }
        if self.shots == 0 {
            return Err(EvalError::Config("shots must be positive".into()));
        }
        if self.n_runs == 0 {
            return Err(EvalError::Config("n_runs must be positive".into()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(EvalError::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if let QueryProtocol::PerClass(0) = self.queries {
            return Err(EvalError::Config("queries per class must be positive".into()));
        }
        if let Some(0) = self.views {
            return Err(EvalError::Config("views cap must be positive".into()));
        }
        Ok(())
    }
}

/// Aggregated result of an evaluation: mean accuracy with a 95% interval
/// (`1.96 * sample std / sqrt(runs)`, zero for a single run).
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub mean_accuracy: f64,
    pub half_interval_95: f64,
    pub n_runs: usize,
    /// Per-run accuracies in run-index order. Retained for paired
    /// comparisons; excluded from serialized output.
    #[serde(skip)]
    pub per_run: Vec<f64>,
    /// Wall time. Excluded from serialized output so summaries with equal
    /// inputs stay byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

impl EvalSummary {
    fn from_accuracies(per_run: Vec<f64>, seconds: f64) -> Self {
        let n = per_run.len();
        let mean = per_run.iter().sum::<f64>() / n as f64;
        let half = if n > 1 {
            let var = per_run.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / (n as f64 - 1.0);
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean_accuracy: mean,
            half_interval_95: half,
            n_runs: n,
            per_run,
            seconds,
        }
    }
}

/// What an evaluation runs on: the bank(s), optional exact per-class
/// support vectors (already at the composed dimension), and an optional
/// precomputed centering mean for the inductive setting. Without
/// `base_stats`, inductive centering falls back to the mean over all
/// composed vectors of the supplied banks.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a, S = f64> {
    pub banks: &'a [FeatureBank<S>],
    pub pinned_supports: Option<&'a [FeatureVector<S>]>,
    pub base_stats: Option<&'a PreprocessStats<S>>,
}

impl<'a, S: Scalar> EvalInputs<'a, S> {
    pub fn banks(banks: &'a [FeatureBank<S>]) -> Self {
        Self {
            banks,
            pinned_supports: None,
            base_stats: None,
        }
    }
}

/// Fraction of correctly predicted queries of one task, classified per the
/// configured mode after C/H preprocessing.
pub fn run_accuracy<S: Scalar>(
    task: &Task<S>,
    config: &PipelineConfig,
    base_stats: Option<&PreprocessStats<S>>,
) -> Result<f64, EvalError> {
    if task.n_queries() == 0 {
        return Err(EvalError::Config("task has no queries to score".into()));
    }
    let task = preprocess_task(task, &config.step_config(), base_stats)?;
    let predictions: Vec<usize> = match config.mode {
        Mode::Inductive => {
            let barycenters = ncm_barycenters(task.support())?;
            task.queries()
                .iter()
                .map(|q| ncm_predict(q.vector(), &barycenters))
                .collect::<Result<_, _>>()?
        }
        Mode::Transductive => soft_kmeans_predict(&task, &config.soft_kmeans())?,
    };
    let correct = predictions
        .iter()
        .zip(task.queries())
        .filter(|(p, q)| **p == q.class_index())
        .count();
    Ok(correct as f64 / task.n_queries() as f64)
}

fn compute_base_stats<S: Scalar>(
    banks: &[FeatureBank<S>],
    policy: &ViewPolicy,
) -> Result<PreprocessStats<S>, EvalError> {
    let dim: usize = banks.iter().map(FeatureBank::dim).sum();
    let mut acc = MeanAccumulator::new(dim);
    for class_position in 0..banks[0].n_classes() {
        for image in 0..banks[0].class(class_position).n_images() {
            acc.push(&compose_image_vector(banks, class_position, image, policy)?)?;
        }
    }
    Ok(acc.finish(MeanSource::BaseDataset)?)
}

fn check_banks<S: Scalar>(
    inputs: &EvalInputs<S>,
    config: &PipelineConfig,
) -> Result<(), EvalError> {
    if inputs.banks.is_empty() {
        return Err(EvalError::Config("no feature banks supplied".into()));
    }
    if config.use_ensemble && inputs.banks.len() < 2 {
        return Err(EvalError::Config(
            "ensemble (E) requires at least 2 feature banks; supply more banks or drop the ensemble step"
                .into(),
        ));
    }
    if !config.use_ensemble && inputs.banks.len() > 1 {
        return Err(EvalError::Config(format!(
            "{} banks supplied but the ensemble step is disabled",
            inputs.banks.len()
        )));
    }
    let report = ensemble_compatibility(inputs.banks);
    if !report.is_empty() {
        let lines: Vec<String> = report.iter().map(ToString::to_string).collect();
        return Err(EvalError::IncompatibleBanks(lines.join("; ")));
    }
    Ok(())
}

/// Evaluates `n_runs` independent episodes and aggregates their accuracies.
/// Identical inputs and config produce identical summaries regardless of
/// how many worker threads are available.
pub fn evaluate<S: Scalar>(
    inputs: &EvalInputs<S>,
    config: &PipelineConfig,
) -> Result<EvalSummary, EvalError> {
    config.validate()?;
    check_banks(inputs, config)?;
    let start = Instant::now();
    let policy = config.view_policy();
    let base_stats = match (config.mode, config.use_center, inputs.base_stats) {
        (Mode::Inductive, true, Some(stats)) => Some(stats.clone()),
        (Mode::Inductive, true, None) => Some(compute_base_stats(inputs.banks, &policy)?),
        _ => None,
    };
    let sample_bank = &inputs.banks[0];
    let per_run: Vec<f64> = (0..config.n_runs)
        .into_par_iter()
        .map(|run| {
            let episode_seed = derive_run_seed(config.seed, run as u64);
            let indices = match config.queries {
                QueryProtocol::PerClass(q) => {
                    sample_task_indices(sample_bank, config.ways, config.shots, q, episode_seed)?
                }
                QueryProtocol::Imbalanced(spec) => sample_imbalanced_task_indices(
                    sample_bank,
                    config.ways,
                    config.shots,
                    &spec,
                    episode_seed,
                )?,
            };
            let task = materialize(&indices, inputs.banks, &policy, inputs.pinned_supports)?;
            run_accuracy(&task, config, base_stats.as_ref())
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(EvalSummary::from_accuracies(
        per_run,
        start.elapsed().as_secs_f64(),
    ))
}

/// Swept pipeline parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Soft K-means temperature.
    Beta,
    /// Number of leading views AS averages per image.
    Views,
    /// Number of banks concatenated, in supplied order.
    Backbones,
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParam::Beta => write!(f, "beta"),
            SweepParam::Views => write!(f, "views"),
            SweepParam::Backbones => write!(f, "backbones"),
        }
    }
}

/// One sweep row: the parameter value, the summary, and the exact config
/// the point ran under.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub config: PipelineConfig,
    pub summary: EvalSummary,
}

fn integral_value(param: SweepParam, value: f64) -> Result<usize, EvalError> {
    if value.fract() != 0.0 || value < 1.0 {
        return Err(EvalError::Config(format!(
            "{param} sweep values must be positive integers, got {value}"
        )));
    }
    Ok(value as usize)
}

/// Runs one evaluation per value of the swept parameter. Every point reuses
/// the base config's global seed, so runs are paired across values.
pub fn sweep<S: Scalar>(
    param: SweepParam,
    values: &[f64],
    inputs: &EvalInputs<S>,
    base_config: &PipelineConfig,
) -> Result<Vec<SweepPoint>, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Config("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut config = base_config.clone();
        let mut point_inputs = *inputs;
        match param {
            SweepParam::Beta => {
                if !value.is_finite() || value <= 0.0 {
                    return Err(EvalError::Config(format!(
                        "beta sweep values must be positive, got {value}"
                    )));
                }
                config.beta = value;
            }
            SweepParam::Views => {
                let views = integral_value(param, value)?;
                let available = inputs.banks.iter().map(FeatureBank::n_views).min().unwrap_or(0);
                if views > available {
                    return Err(EvalError::Config(format!(
                        "views sweep value {views} exceeds the {available} views stored per image"
                    )));
                }
                config.use_view_average = true;
                config.views = Some(views);
            }
            SweepParam::Backbones => {
                let count = integral_value(param, value)?;
                if count > inputs.banks.len() {
                    return Err(EvalError::Config(format!(
                        "backbones sweep value {count} exceeds the {} supplied banks",
                        inputs.banks.len()
                    )));
                }
                point_inputs.banks = &inputs.banks[..count];
                config.use_ensemble = count > 1;
            }
        }
        let summary = evaluate(&point_inputs, &config)?;
        points.push(SweepPoint {
            value,
            config,
            summary,
        });
    }
    Ok(points)
}

/// CSV header matching [`csv_row`].
pub fn csv_header() -> &'static str {
    "method,mode,n,k,q,beta,runs,seed,mean,interval,seconds"
}

/// One CSV row of a summary. `q` is the per-class query count, or the query
/// total under the imbalanced protocol.
pub fn csv_row(config: &PipelineConfig, summary: &EvalSummary) -> String {
    let q = match config.queries {
        QueryProtocol::PerClass(q) => q,
        QueryProtocol::Imbalanced(spec) => spec.q_total,
    };
    format!(
        "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.3}",
        config.method_name(),
        config.mode,
        config.ways,
        config.shots,
        q,
        config.beta,
        config.n_runs,
        config.seed,
        summary.mean_accuracy,
        summary.half_interval_95,
        summary.seconds
    )
}

/// JSON document for one evaluation: the full config (with its derived
/// method name) and the deterministic summary fields.
pub fn summary_json(config: &PipelineConfig, summary: &EvalSummary) -> serde_json::Value {
    let mut config_value = serde_json::to_value(config).expect("config serializes");
    config_value["method"] = serde_json::Value::String(config.method_name().to_string());
    serde_json::json!({
        "config": config_value,
        "summary": summary,
    })
}
