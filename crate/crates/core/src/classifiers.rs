//! Nearest class mean and temperature-weighted soft K-means.
//!
//! Inductive prediction computes class barycenters from the supports and
//! assigns each query to the closest one. Transductive prediction refines
//! the barycenters iteratively: every query contributes to every class,
//! weighted by a softmax over negative squared distances scaled by the
//! temperature; support vectors contribute only to their own class with
//! weight one. Iteration stops when no barycenter moves more than the
//! configured tolerance or the iteration budget runs out, then queries are
//! assigned to the closest refined barycenter.
//!
//! Ties in any argmin break deterministically toward the lowest class
//! index. The softmax subtracts the max exponent first, so temperatures
//! across the whole sweep range stay finite.

use thiserror::Error;

use crate::feature_store::FeatureVector;
use crate::sampler::Task;
use crate::scalar::{cast, upcast, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("support class {0} is empty")]
    EmptyClass(usize),
    #[error("a task needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
}

/// Class barycenters at some refinement iteration (0 = plain class means).
#[derive(Debug, Clone, PartialEq)]
pub struct Barycenters<S = f64> {
    centers: Vec<FeatureVector<S>>,
    iteration: usize,
}

impl<S: Scalar> Barycenters<S> {
    pub fn new(centers: Vec<FeatureVector<S>>, iteration: usize) -> Self {
        Self { centers, iteration }
    }

    pub fn centers(&self) -> &[FeatureVector<S>] {
        &self.centers
    }

    pub fn ways(&self) -> usize {
        self.centers.len()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map(FeatureVector::dim).unwrap_or(0)
    }
}

/// Soft K-means knobs. `beta` is the softmax temperature; refinement stops
/// once the largest barycenter L2 movement drops below `shift_tol` or after
/// `max_iters` steps, whichever comes first.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SoftKMeansConfig {
    pub beta: f64,
    pub max_iters: usize,
    pub shift_tol: f64,
}

impl Default for SoftKMeansConfig {
    fn default() -> Self {
        Self {
            beta: 5.0,
            max_iters: 30,
            shift_tol: 1e-6,
        }
    }
}

impl SoftKMeansConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(ClassifierError::InvalidTemperature(self.beta));
        }
        Ok(())
    }
}

/// Class barycenters: the per-class mean of the support vectors.
pub fn ncm_barycenters<S: Scalar>(
    support: &[Vec<FeatureVector<S>>],
) -> Result<Barycenters<S>, ClassifierError> {
    if support.len() < 2 {
        return Err(ClassifierError::TooFewClasses(support.len()));
    }
    let mut centers = Vec::with_capacity(support.len());
    let dim = support
        .first()
        .and_then(|shots| shots.first())
        .map(FeatureVector::dim)
        .ok_or(ClassifierError::EmptyClass(0))?;
    for (class, shots) in support.iter().enumerate() {
        if shots.is_empty() {
            return Err(ClassifierError::EmptyClass(class));
        }
        let mut sum = vec![S::zero(); dim];
        for shot in shots {
            if shot.dim() != dim {
                return Err(ClassifierError::DimensionMismatch {
                    expected: dim,
                    found: shot.dim(),
                });
            }
            for (acc, &x) in sum.iter_mut().zip(shot.iter()) {
                *acc = *acc + x;
            }
        }
        let inv = S::one() / cast::<S>(shots.len() as f64);
        centers.push(FeatureVector::new(
            sum.into_iter().map(|s| s * inv).collect(),
        ));
    }
    Ok(Barycenters::new(centers, 0))
}

/// Index of the barycenter closest in L2 distance; ties break toward the
/// lowest class index.
pub fn ncm_predict<S: Scalar>(
    query: &FeatureVector<S>,
    barycenters: &Barycenters<S>,
) -> Result<usize, ClassifierError> {
    if query.dim() != barycenters.dim() {
        return Err(ClassifierError::DimensionMismatch {
            expected: barycenters.dim(),
            found: query.dim(),
        });
    }
    let mut best = 0;
    let mut best_dist = query.squared_distance(&barycenters.centers[0]);
    for (idx, center) in barycenters.centers.iter().enumerate().skip(1) {
        let dist = query.squared_distance(center);
        if dist < best_dist {
            best = idx;
            best_dist = dist;
        }
    }
    Ok(best)
}

/// Per-class association weights for one vector. Queries get a softmax of
/// `-beta * squared_distance` over the barycenters, computed with
/// max-subtraction so large temperatures cannot overflow; a support vector
/// of class `i` gets the indicator of class `i`.
pub fn soft_weights<S: Scalar>(
    vector: &FeatureVector<S>,
    barycenters: &Barycenters<S>,
    beta: f64,
    support_class: Option<usize>,
) -> Result<Vec<S>, ClassifierError> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(ClassifierError::InvalidTemperature(beta));
    }
    if vector.dim() != barycenters.dim() {
        return Err(ClassifierError::DimensionMismatch {
            expected: barycenters.dim(),
            found: vector.dim(),
        });
    }
    let ways = barycenters.ways();
    if let Some(own) = support_class {
        let mut weights = vec![S::zero(); ways];
        weights[own] = S::one();
        return Ok(weights);
    }
    let beta = cast::<S>(beta);
    let logits: Vec<S> = barycenters
        .centers
        .iter()
        .map(|c| -beta * vector.squared_distance(c))
        .collect();
    let max = logits
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total = exps.iter().fold(S::zero(), |a, &b| a + b);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// One refinement step: every barycenter becomes the weighted average of
/// its supports (weight one) and all queries (their soft weights at the
/// current iteration). The denominator is at least the support count, so
/// the update is always well defined.
pub fn soft_kmeans_step<S: Scalar>(
    task: &Task<S>,
    barycenters: &Barycenters<S>,
    config: &SoftKMeansConfig,
) -> Result<Barycenters<S>, ClassifierError> {
    config.validate()?;
    let ways = barycenters.ways();
    let dim = barycenters.dim();
    let mut sums = vec![vec![S::zero(); dim]; ways];
    let mut totals = vec![S::zero(); ways];
    for (class, shots) in task.support().iter().enumerate() {
        for shot in shots {
            if shot.dim() != dim {
                return Err(ClassifierError::DimensionMismatch {
                    expected: dim,
                    found: shot.dim(),
                });
            }
            for (acc, &x) in sums[class].iter_mut().zip(shot.iter()) {
                *acc = *acc + x;
            }
            totals[class] = totals[class] + S::one();
        }
    }
    for query in task.queries() {
        let weights = soft_weights(query.vector(), barycenters, config.beta, None)?;
        for (class, &w) in weights.iter().enumerate() {
            for (acc, &x) in sums[class].iter_mut().zip(query.vector().iter()) {
                *acc = *acc + w * x;
            }
            totals[class] = totals[class] + w;
        }
    }
    let centers = sums
        .into_iter()
        .zip(totals)
        .map(|(sum, total)| FeatureVector::new(sum.into_iter().map(|s| s / total).collect()))
        .collect();
    Ok(Barycenters::new(centers, barycenters.iteration() + 1))
}

/// Runs refinement from the plain class means until the largest barycenter
/// movement falls below `shift_tol` or `max_iters` steps have run.
pub fn soft_kmeans_barycenters<S: Scalar>(
    task: &Task<S>,
    config: &SoftKMeansConfig,
) -> Result<Barycenters<S>, ClassifierError> {
    config.validate()?;
    let mut current = ncm_barycenters(task.support())?;
    for _ in 0..config.max_iters {
        let next = soft_kmeans_step(task, &current, config)?;
        let shift = max_center_shift(&current, &next);
        current = next;
        if shift < config.shift_tol {
            break;
        }
    }
    Ok(current)
}

fn max_center_shift<S: Scalar>(a: &Barycenters<S>, b: &Barycenters<S>) -> f64 {
    a.centers
        .iter()
        .zip(b.centers.iter())
        .map(|(x, y)| upcast(x.squared_distance(y)).sqrt())
        .fold(0.0, f64::max)
}

/// Transductive prediction: refine barycenters, then assign every query to
/// the closest refined one. With `max_iters = 0` this is exactly NCM.
pub fn soft_kmeans_predict<S: Scalar>(
    task: &Task<S>,
    config: &SoftKMeansConfig,
) -> Result<Vec<usize>, ClassifierError> {
    let final_centers = soft_kmeans_barycenters(task, config)?;
    task.queries()
        .iter()
        .map(|q| ncm_predict(q.vector(), &final_centers))
        .collect()
}
