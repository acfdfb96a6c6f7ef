//! Episode sampling.
//!
//! A run draws `n` classes uniformly without replacement from a bank, then
//! `k + q` images per class uniformly without replacement; the first `k`
//! drawn go to the support set. Everything is a pure function of
//! `(bank, parameters, seed)`: the generator is ChaCha8 keyed from the
//! episode seed, and per-run episode seeds derive from the global seed via
//! SplitMix64 so workers can sample independently in any order.
//!
//! The imbalanced variant draws per-class query counts from a symmetric
//! Dirichlet and rounds them by largest remainder so they always sum to the
//! requested total; the counts stay hidden from the classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::feature_store::{FeatureBank, FeatureVector};
use crate::preprocessing::{compose_image_vector, PreprocessError, ViewPolicy};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("bank has {have} classes, task needs {need}")]
    NotEnoughClasses { have: usize, need: usize },
    #[error("class {class_id} has {have} images, task needs {need}")]
    NotEnoughImages {
        class_id: u32,
        have: usize,
        need: usize,
    },
    #[error("invalid imbalance spec: {0}")]
    InvalidImbalanceSpec(String),
    #[error("pinned support list covers {have} classes, bank has {need}")]
    PinnedSupportMismatch { have: usize, need: usize },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output step (public-domain generator of Steele et al.).
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the episode seed for one run: `global_seed` is xored with the
/// run index times the SplitMix64 increment, then finalized with one mix
/// step. Injective in the index for a fixed global seed.
pub fn derive_run_seed(global_seed: u64, run_index: u64) -> u64 {
    let mut state = global_seed ^ run_index.wrapping_mul(SPLITMIX_GAMMA);
    splitmix64(&mut state)
}

/// ChaCha8 generator keyed from a 64-bit seed. The 256-bit key is built
/// from four consecutive SplitMix64 outputs, so the whole stream is pinned
/// by the published definitions of the two generators.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// First `count` entries of a uniform random permutation of `0..population`
/// (partial Fisher-Yates). Draw order is meaningful: callers take the first
/// `k` drawn images as the support set.
fn sample_without_replacement(
    rng: &mut ChaCha8Rng,
    population: usize,
    count: usize,
) -> Vec<usize> {
    debug_assert!(count <= population);
    let mut indices: Vec<usize> = (0..population).collect();
    for i in 0..count {
        let j = i + rng.random_range(0..population - i);
        indices.swap(i, j);
    }
    indices.truncate(count);
    indices
}

/// Imbalanced-protocol parameters: a fixed query total split across classes
/// by a symmetric Dirichlet draw.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImbalanceSpec {
    pub q_total: usize,
    pub dirichlet_a: f64,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        Self {
            q_total: 75,
            dirichlet_a: 2.0,
        }
    }
}

impl ImbalanceSpec {
    fn validate(&self, ways: usize) -> Result<(), SampleError> {
        if self.q_total < ways {
            return Err(SampleError::InvalidImbalanceSpec(format!(
                "q_total {} is below the number of ways {}",
                self.q_total, ways
            )));
        }
        if !self.dirichlet_a.is_finite() || self.dirichlet_a <= 0.0 {
            return Err(SampleError::InvalidImbalanceSpec(format!(
                "dirichlet_a must be positive, got {}",
                self.dirichlet_a
            )));
        }
        Ok(())
    }
}

/// Proportions from a symmetric Dirichlet(alpha) via normalized Gamma draws.
/// If every Gamma draw underflows to zero (pathologically small alpha) the
/// split falls back to uniform.
fn dirichlet_proportions(rng: &mut ChaCha8Rng, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated alpha");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= f64::MIN_POSITIVE {
        return vec![1.0 / n as f64; n];
    }
    draws.into_iter().map(|g| g / total).collect()
}

/// Rounds proportions of `total` to integers that sum to `total` exactly:
/// floor everything, then hand out the remainder by largest fractional
/// part, ties going to the lowest class index.
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (idx, &p) in proportions.iter().enumerate() {
        let raw = p * total as f64;
        let floor = raw.floor().min(total as f64) as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((idx, raw - floor as f64));
    }
    let mut leftover = total.saturating_sub(assigned);
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (idx, _) in remainders {
        if leftover == 0 {
            break;
        }
        counts[idx] += 1;
        leftover -= 1;
    }
    counts
}

/// The index skeleton of an episode: which bank classes were drawn and
/// which image goes where. Vectors are attached later by [`materialize`],
/// which lets ensembles and sweeps share one skeleton across banks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskIndices {
    /// Positions (not ids) of the drawn classes in the bank, in draw order;
    /// position in this list is the task-local class index.
    pub classes: Vec<usize>,
    /// Per task class: the drawn support image indices.
    pub support_images: Vec<Vec<usize>>,
    /// Per task class: the drawn query image indices.
    pub query_images: Vec<Vec<usize>>,
    pub episode_seed: u64,
}

fn sample_classes<S: Scalar>(
    bank: &FeatureBank<S>,
    ways: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, SampleError> {
    if bank.n_classes() < ways {
        return Err(SampleError::NotEnoughClasses {
            have: bank.n_classes(),
            need: ways,
        });
    }
    Ok(sample_without_replacement(rng, bank.n_classes(), ways))
}

fn sample_images_for_class<S: Scalar>(
    bank: &FeatureBank<S>,
    class_position: usize,
    shots: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>), SampleError> {
    let class = bank.class(class_position);
    let need = shots + queries;
    if class.n_images() < need {
        return Err(SampleError::NotEnoughImages {
            class_id: class.class_id(),
            have: class.n_images(),
            need,
        });
    }
    let mut drawn = sample_without_replacement(rng, class.n_images(), need);
    let query_imgs = drawn.split_off(shots);
    Ok((drawn, query_imgs))
}

/// Draws the index skeleton of a balanced n-way k-shot q-query episode.
pub fn sample_task_indices<S: Scalar>(
    bank: &FeatureBank<S>,
    ways: usize,
    shots: usize,
    queries_per_class: usize,
    episode_seed: u64,
) -> Result<TaskIndices, SampleError> {
    let mut rng = rng_from_seed(episode_seed);
    let classes = sample_classes(bank, ways, &mut rng)?;
    let mut support_images = Vec::with_capacity(ways);
    let mut query_images = Vec::with_capacity(ways);
    for &class_position in &classes {
        let (s, q) =
            sample_images_for_class(bank, class_position, shots, queries_per_class, &mut rng)?;
        support_images.push(s);
        query_images.push(q);
    }
    Ok(TaskIndices {
        classes,
        support_images,
        query_images,
        episode_seed,
    })
}

/// Draws the index skeleton of an imbalanced episode: classes first, then
/// the hidden per-class query counts, then the images.
pub fn sample_imbalanced_task_indices<S: Scalar>(
    bank: &FeatureBank<S>,
    ways: usize,
    shots: usize,
    spec: &ImbalanceSpec,
    episode_seed: u64,
) -> Result<TaskIndices, SampleError> {
    spec.validate(ways)?;
    let mut rng = rng_from_seed(episode_seed);
    let classes = sample_classes(bank, ways, &mut rng)?;
    let proportions = dirichlet_proportions(&mut rng, ways, spec.dirichlet_a);
    let counts = largest_remainder_counts(&proportions, spec.q_total);
    let mut support_images = Vec::with_capacity(ways);
    let mut query_images = Vec::with_capacity(ways);
    for (slot, &class_position) in classes.iter().enumerate() {
        let (s, q) =
            sample_images_for_class(bank, class_position, shots, counts[slot], &mut rng)?;
        support_images.push(s);
        query_images.push(q);
    }
    Ok(TaskIndices {
        classes,
        support_images,
        query_images,
        episode_seed,
    })
}

/// A query vector with its hidden ground-truth class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuery<S = f64> {
    vector: FeatureVector<S>,
    class_index: usize,
}

impl<S: Scalar> LabeledQuery<S> {
    pub fn new(vector: FeatureVector<S>, class_index: usize) -> Self {
        Self {
            vector,
            class_index,
        }
    }

    pub fn vector(&self) -> &FeatureVector<S> {
        &self.vector
    }

    /// Ground truth, for scoring only; classifiers never see it.
    pub fn class_index(&self) -> usize {
        self.class_index
    }
}

/// One sampled few-shot episode. Support class indices are `0..n-1`; query
/// labels refer to the same local indices. No image appears in both the
/// support and the query set.
#[derive(Debug, Clone, PartialEq)]
pub struct Task<S = f64> {
    support: Vec<Vec<FeatureVector<S>>>,
    queries: Vec<LabeledQuery<S>>,
    episode_seed: u64,
}

impl<S: Scalar> Task<S> {
    pub fn new(
        support: Vec<Vec<FeatureVector<S>>>,
        queries: Vec<LabeledQuery<S>>,
        episode_seed: u64,
    ) -> Self {
        debug_assert!(queries.iter().all(|q| q.class_index < support.len()));
        Self {
            support,
            queries,
            episode_seed,
        }
    }

    pub fn ways(&self) -> usize {
        self.support.len()
    }

    pub fn support(&self) -> &[Vec<FeatureVector<S>>] {
        &self.support
    }

    pub fn queries(&self) -> &[LabeledQuery<S>] {
        &self.queries
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    pub fn dim(&self) -> usize {
        self.support
            .iter()
            .flatten()
            .map(FeatureVector::dim)
            .next()
            .or_else(|| self.queries.first().map(|q| q.vector.dim()))
            .unwrap_or(0)
    }

    /// All support vectors, then all query vectors.
    pub fn iter_vectors(&self) -> impl Iterator<Item = &FeatureVector<S>> {
        self.support
            .iter()
            .flatten()
            .chain(self.queries.iter().map(|q| &q.vector))
    }

    /// Rebuilds the task with every vector transformed, keeping labels,
    /// class structure and episode seed.
    pub fn try_map_vectors<E>(
        &self,
        mut f: impl FnMut(&FeatureVector<S>) -> Result<FeatureVector<S>, E>,
    ) -> Result<Self, E> {
        let support = self
            .support
            .iter()
            .map(|class| class.iter().map(&mut f).collect::<Result<Vec<_>, E>>())
            .collect::<Result<Vec<_>, E>>()?;
        let queries = self
            .queries
            .iter()
            .map(|q| {
                Ok(LabeledQuery {
                    vector: f(&q.vector)?,
                    class_index: q.class_index,
                })
            })
            .collect::<Result<Vec<_>, E>>()?;
        Ok(Self {
            support,
            queries,
            episode_seed: self.episode_seed,
        })
    }
}

/// Attaches vectors to an index skeleton. Each image becomes one vector via
/// the view policy (AS) and bank concatenation (E). When `pinned_supports`
/// is given (one vector per bank class position, already at the composed
/// dimension), support vectors are replaced by their class's pinned vector;
/// queries are untouched.
pub fn materialize<S: Scalar>(
    indices: &TaskIndices,
    banks: &[FeatureBank<S>],
    policy: &ViewPolicy,
    pinned_supports: Option<&[FeatureVector<S>]>,
) -> Result<Task<S>, SampleError> {
    if banks.is_empty() {
        return Err(SampleError::Preprocess(PreprocessError::EmptyList));
    }
    if let Some(pinned) = pinned_supports {
        if pinned.len() != banks[0].n_classes() {
            return Err(SampleError::PinnedSupportMismatch {
                have: pinned.len(),
                need: banks[0].n_classes(),
            });
        }
    }
    let ways = indices.classes.len();
    let mut support = Vec::with_capacity(ways);
    let mut queries = Vec::new();
    for (slot, &class_position) in indices.classes.iter().enumerate() {
        let class_support = match pinned_supports {
            Some(pinned) => indices.support_images[slot]
                .iter()
                .map(|_| pinned[class_position].clone())
                .collect(),
            None => indices.support_images[slot]
                .iter()
                .map(|&img| compose_image_vector(banks, class_position, img, policy))
                .collect::<Result<Vec<_>, _>>()?,
        };
        support.push(class_support);
        for &img in &indices.query_images[slot] {
            let vector = compose_image_vector(banks, class_position, img, policy)?;
            queries.push(LabeledQuery::new(vector, slot));
        }
    }
    Ok(Task::new(support, queries, indices.episode_seed))
}

/// Samples a balanced episode from one bank, averaging all views per image.
pub fn sample_task<S: Scalar>(
    bank: &FeatureBank<S>,
    ways: usize,
    shots: usize,
    queries_per_class: usize,
    episode_seed: u64,
) -> Result<Task<S>, SampleError> {
    let indices = sample_task_indices(bank, ways, shots, queries_per_class, episode_seed)?;
    materialize(
        &indices,
        std::slice::from_ref(bank),
        &ViewPolicy::default(),
        None,
    )
}

/// Samples an imbalanced episode from one bank, averaging all views per image.
pub fn sample_imbalanced_task<S: Scalar>(
    bank: &FeatureBank<S>,
    ways: usize,
    shots: usize,
    spec: &ImbalanceSpec,
    episode_seed: u64,
) -> Result<Task<S>, SampleError> {
    let indices = sample_imbalanced_task_indices(bank, ways, shots, spec, episode_seed)?;
    materialize(
        &indices,
        std::slice::from_ref(bank),
        &ViewPolicy::default(),
        None,
    )
}
