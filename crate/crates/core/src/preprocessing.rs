//! Feature transforms between the bank and the classifier.
//!
//! Per image, the pipeline composes in a fixed order: view averaging (AS),
//! ensemble concatenation (E), centering (C), hypersphere projection (H).
//! AS and E run at task materialization; C and H run on whole tasks via
//! [`preprocess_task`], with the centering mean taken from the base dataset
//! in the inductive setting and from the task's own vectors in the
//! transductive setting.
//!
//! Everything here is a pure function; all of it is safe to call from
//! concurrent evaluation workers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{FeatureBank, FeatureVector};
use crate::sampler::Task;
use crate::scalar::{cast, upcast, Scalar};

/// Vectors with an L2 norm at or below this are considered degenerate and
/// refuse hypersphere projection; a zero embedding indicates corrupt input.
pub const DEGENERATE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("cannot average an empty view list")]
    EmptyViewList,
    #[error("cannot operate on an empty vector list")]
    EmptyList,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate vector: L2 norm {norm:e} is at or below {DEGENERATE_NORM_EPS:e}")]
    DegenerateVector { norm: f64 },
    #[error("inductive centering requires precomputed base statistics")]
    MissingBaseStats,
}

/// Whether a prediction may see only the supports or the whole query set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inductive,
    Transductive,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Inductive => write!(f, "inductive"),
            Mode::Transductive => write!(f, "transductive"),
        }
    }
}

/// Where a centering mean was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanSource {
    BaseDataset,
    TaskVectors,
}

/// A mean vector used for centering, tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessStats<S = f64> {
    mean: FeatureVector<S>,
    source: MeanSource,
}

impl<S: Scalar> PreprocessStats<S> {
    pub fn new(mean: FeatureVector<S>, source: MeanSource) -> Self {
        Self { mean, source }
    }

    pub fn mean(&self) -> &FeatureVector<S> {
        &self.mean
    }

    pub fn source(&self) -> MeanSource {
        self.source
    }
}

/// Incremental mean over vectors of equal dimension.
#[derive(Debug, Clone)]
pub struct MeanAccumulator<S = f64> {
    sum: Vec<S>,
    count: usize,
}

impl<S: Scalar> MeanAccumulator<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![S::zero(); dim],
            count: 0,
        }
    }

    pub fn push(&mut self, v: &FeatureVector<S>) -> Result<(), PreprocessError> {
        if v.dim() != self.sum.len() {
            return Err(PreprocessError::DimensionMismatch {
                expected: self.sum.len(),
                found: v.dim(),
            });
        }
        for (acc, &x) in self.sum.iter_mut().zip(v.iter()) {
            *acc = *acc + x;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, source: MeanSource) -> Result<PreprocessStats<S>, PreprocessError> {
        if self.count == 0 {
            return Err(PreprocessError::EmptyList);
        }
        let inv = S::one() / cast::<S>(self.count as f64);
        let mean = self.sum.into_iter().map(|s| s * inv).collect();
        Ok(PreprocessStats::new(FeatureVector::new(mean), source))
    }
}

/// Coordinate-wise arithmetic mean of the views of one image.
pub fn average_views<S: Scalar>(
    views: &[FeatureVector<S>],
) -> Result<FeatureVector<S>, PreprocessError> {
    if views.is_empty() {
        return Err(PreprocessError::EmptyViewList);
    }
    let dim = views[0].dim();
    let mut acc = MeanAccumulator::new(dim);
    for v in views {
        acc.push(v)?;
    }
    Ok(acc.finish(MeanSource::TaskVectors)?.mean)
}

/// Concatenates per-backbone vectors into one; input `i` occupies the
/// contiguous slice after the first `i` dimensions, in argument order.
pub fn concat_features<S: Scalar>(
    per_backbone: &[FeatureVector<S>],
) -> Result<FeatureVector<S>, PreprocessError> {
    if per_backbone.is_empty() {
        return Err(PreprocessError::EmptyList);
    }
    let total: usize = per_backbone.iter().map(|v| v.dim()).sum();
    let mut values = Vec::with_capacity(total);
    for v in per_backbone {
        values.extend_from_slice(v.values());
    }
    Ok(FeatureVector::new(values))
}

/// Coordinate-wise mean of a non-empty vector list; the source tag records
/// whether the caller computed it over the base dataset or a task.
pub fn compute_mean<S: Scalar>(
    vectors: &[FeatureVector<S>],
    source: MeanSource,
) -> Result<PreprocessStats<S>, PreprocessError> {
    if vectors.is_empty() {
        return Err(PreprocessError::EmptyList);
    }
    let mut acc = MeanAccumulator::new(vectors[0].dim());
    for v in vectors {
        acc.push(v)?;
    }
    acc.finish(source)
}

/// Subtracts the stats mean from a vector.
pub fn center<S: Scalar>(
    z: &FeatureVector<S>,
    stats: &PreprocessStats<S>,
) -> Result<FeatureVector<S>, PreprocessError> {
    if z.dim() != stats.mean.dim() {
        return Err(PreprocessError::DimensionMismatch {
            expected: stats.mean.dim(),
            found: z.dim(),
        });
    }
    let values = z
        .iter()
        .zip(stats.mean.iter())
        .map(|(&a, &m)| a - m)
        .collect();
    Ok(FeatureVector::new(values))
}

/// Inverse of [`center`] for the same stats.
pub fn uncenter<S: Scalar>(
    z_c: &FeatureVector<S>,
    stats: &PreprocessStats<S>,
) -> Result<FeatureVector<S>, PreprocessError> {
    if z_c.dim() != stats.mean.dim() {
        return Err(PreprocessError::DimensionMismatch {
            expected: stats.mean.dim(),
            found: z_c.dim(),
        });
    }
    let values = z_c
        .iter()
        .zip(stats.mean.iter())
        .map(|(&a, &m)| a + m)
        .collect();
    Ok(FeatureVector::new(values))
}

/// Scales a vector to unit L2 norm. Degenerate (near-zero) vectors are an
/// error, never silently zeroed.
pub fn project_hypersphere<S: Scalar>(
    z_c: &FeatureVector<S>,
) -> Result<FeatureVector<S>, PreprocessError> {
    let norm = z_c.l2_norm();
    if upcast(norm) <= DEGENERATE_NORM_EPS {
        return Err(PreprocessError::DegenerateVector {
            norm: upcast(norm),
        });
    }
    let inv = S::one() / norm;
    Ok(FeatureVector::new(z_c.iter().map(|&v| v * inv).collect()))
}

/// How per-image views turn into a single vector per backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewPolicy {
    /// Average the views (AS). When false, only the first view is used.
    pub average: bool,
    /// Cap on how many leading views are averaged; `None` uses all of them.
    pub max_views: Option<usize>,
}

impl Default for ViewPolicy {
    fn default() -> Self {
        Self {
            average: true,
            max_views: None,
        }
    }
}

/// Builds the single post-AS, post-E vector of one image: averages each
/// bank's views under the policy, then concatenates across banks in order.
pub fn compose_image_vector<S: Scalar>(
    banks: &[FeatureBank<S>],
    class_position: usize,
    image: usize,
    policy: &ViewPolicy,
) -> Result<FeatureVector<S>, PreprocessError> {
    if banks.is_empty() {
        return Err(PreprocessError::EmptyList);
    }
    let mut parts = Vec::with_capacity(banks.len());
    for bank in banks {
        let views = bank.class(class_position).views(image);
        let part = if policy.average {
            let take = policy.max_views.unwrap_or(views.len()).min(views.len());
            average_views(&views[..take])?
        } else {
            views.first().ok_or(PreprocessError::EmptyViewList)?.clone()
        };
        parts.push(part);
    }
    concat_features(&parts)
}

/// C/H toggles plus the mode that decides where the centering mean comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepConfig {
    pub mode: Mode,
    pub center: bool,
    pub normalize: bool,
}

/// Applies centering and hypersphere projection to every support and query
/// vector of a task. Inductive centering requires `base_stats`; transductive
/// centering ignores it and uses the mean over all of the task's vectors.
/// With both steps disabled the task is returned unchanged.
pub fn preprocess_task<S: Scalar>(
    task: &Task<S>,
    config: &StepConfig,
    base_stats: Option<&PreprocessStats<S>>,
) -> Result<Task<S>, PreprocessError> {
    if !config.center && !config.normalize {
        return Ok(task.clone());
    }
    let stats = if config.center {
        Some(match config.mode {
            Mode::Inductive => base_stats.ok_or(PreprocessError::MissingBaseStats)?.clone(),
            Mode::Transductive => {
                let mut acc = MeanAccumulator::new(task.dim());
                for v in task.iter_vectors() {
                    acc.push(v)?;
                }
                acc.finish(MeanSource::TaskVectors)?
            }
        })
    } else {
        None
    };
    task.try_map_vectors(|v| {
        let mut out = match &stats {
            Some(stats) => center(v, stats)?,
            None => v.clone(),
        };
        if config.normalize {
            out = project_hypersphere(&out)?;
        }
        Ok(out)
    })
}
