//! Synthetic Gaussian class-cluster banks with an analytic accuracy oracle.
//!
//! Class means sit at the vertices of a regular simplex scaled so every
//! pairwise distance equals `separation`, centered on the origin. Each
//! image is its class mean plus isotropic Gaussian noise; each view adds
//! independent per-view jitter on top, simulating crops. Generation is a
//! pure function of the spec, and values are quantized to 32-bit floats at
//! creation so banks survive the on-disk round trip bit-exactly.
//!
//! For 2-way problems with supports pinned to the true means, the
//! nearest-mean accuracy has a closed form: the query's projection onto
//! the inter-mean axis is the only coordinate that matters, giving
//! `P(correct) = Phi(d / (2 * sigma_eff))` with the view jitter folded into
//! `sigma_eff` when views are averaged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{ClassFeatures, FeatureBank, FeatureVector};
use crate::sampler::{derive_run_seed, rng_from_seed};
use crate::scalar::{cast, Scalar};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("oracle unsupported for this spec: {0}")]
    UnsupportedSpec(String),
}

/// Parameters of the Gaussian class-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub images_per_class: usize,
    #[serde(default = "default_n_views")]
    pub n_views: usize,
    /// Pairwise distance between class means.
    pub separation: f64,
    /// Isotropic per-image noise std.
    pub sigma: f64,
    /// Per-view jitter std, simulating crops.
    #[serde(default)]
    pub view_noise: f64,
    /// When set, evaluation replaces every support vector with the exact
    /// class mean, enabling the closed-form oracle.
    #[serde(default)]
    pub pin_supports_to_means: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_views() -> usize {
    1
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.n_classes < 2 {
            return Err(SyntheticError::InvalidSpec(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.dim + 1 < self.n_classes {
            return Err(SyntheticError::InvalidSpec(format!(
                "a regular simplex of {} means needs dim >= {}, got {}",
                self.n_classes,
                self.n_classes - 1,
                self.dim
            )));
        }
        if self.images_per_class == 0 {
            return Err(SyntheticError::InvalidSpec(
                "images_per_class must be positive".into(),
            ));
        }
        if self.n_views == 0 {
            return Err(SyntheticError::InvalidSpec(
                "n_views must be positive".into(),
            ));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(SyntheticError::InvalidSpec(format!(
                "separation must be non-negative, got {}",
                self.separation
            )));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(SyntheticError::InvalidSpec(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !self.view_noise.is_finite() || self.view_noise < 0.0 {
            return Err(SyntheticError::InvalidSpec(format!(
                "view_noise must be non-negative, got {}",
                self.view_noise
            )));
        }
        Ok(())
    }
}

/// Vertices of a regular simplex with `n` points of pairwise distance
/// `separation` in `dim` dimensions, centered on the origin.
///
/// Built incrementally with unit edges: vertex `i` copies the centroid of
/// the previous vertices and extends coordinate `i - 1` by the height
/// `sqrt((i + 1) / (2i))`, then the whole configuration is centered and
/// scaled.
pub fn simplex_vertices(
    n: usize,
    dim: usize,
    separation: f64,
) -> Result<Vec<Vec<f64>>, SyntheticError> {
    if n < 2 {
        return Err(SyntheticError::InvalidSpec(
            "a simplex needs at least 2 vertices".into(),
        ));
    }
    if dim + 1 < n {
        return Err(SyntheticError::InvalidSpec(format!(
            "{n} simplex vertices need at least {} dimensions, got {dim}",
            n - 1
        )));
    }
    let mut vertices = vec![vec![0.0f64; dim]; n];
    for i in 1..n {
        // vertex i sits over the centroid of the previous i vertices, which
        // occupy only the first i-1 coordinates
        let centroid: Vec<f64> = (0..(i - 1))
            .map(|j| (0..i).map(|v| vertices[v][j]).sum::<f64>() / i as f64)
            .collect();
        vertices[i][..(i - 1)].copy_from_slice(&centroid);
        vertices[i][i - 1] = ((i as f64 + 1.0) / (2.0 * i as f64)).sqrt();
    }
    // center on the origin, then scale edges from 1 to `separation`
    for j in 0..dim {
        let centroid: f64 = vertices.iter().map(|v| v[j]).sum::<f64>() / n as f64;
        for v in &mut vertices {
            v[j] -= centroid;
        }
    }
    for v in &mut vertices {
        for x in v.iter_mut() {
            *x *= separation;
        }
    }
    Ok(vertices)
}

/// The exact class means of a spec, in class order.
pub fn class_means<S: Scalar>(spec: &SyntheticSpec) -> Result<Vec<FeatureVector<S>>, SyntheticError> {
    spec.validate()?;
    let vertices = simplex_vertices(spec.n_classes, spec.dim, spec.separation)?;
    Ok(vertices
        .into_iter()
        .map(|v| FeatureVector::from_f64(&v))
        .collect())
}

/// Quantize through f32 so generated banks match their stored form exactly.
fn quantize(x: f64) -> f64 {
    f64::from(x as f32)
}

fn generate_with_source<S: Scalar>(
    spec: &SyntheticSpec,
    seed: u64,
    source_id: String,
) -> Result<FeatureBank<S>, SyntheticError> {
    spec.validate()?;
    let means = simplex_vertices(spec.n_classes, spec.dim, spec.separation)?;
    let mut rng = rng_from_seed(seed);
    let mut classes = Vec::with_capacity(spec.n_classes);
    for (class_idx, mean) in means.iter().enumerate() {
        let mut images = Vec::with_capacity(spec.images_per_class);
        for _ in 0..spec.images_per_class {
            let image: Vec<f64> = mean
                .iter()
                .map(|&m| m + spec.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut views = Vec::with_capacity(spec.n_views);
            for _ in 0..spec.n_views {
                let view: Vec<S> = if spec.view_noise > 0.0 {
                    image
                        .iter()
                        .map(|&x| {
                            cast(quantize(
                                x + spec.view_noise * rng.sample::<f64, _>(StandardNormal),
                            ))
                        })
                        .collect()
                } else {
                    image.iter().map(|&x| cast(quantize(x))).collect()
                };
                views.push(FeatureVector::new(view));
            }
            images.push(views);
        }
        classes.push(ClassFeatures::new(class_idx as u32, images));
    }
    FeatureBank::new(spec.dim, spec.n_views, source_id, classes)
        .map_err(|e| SyntheticError::InvalidSpec(e.to_string()))
}

/// Generates one bank from the spec. Deterministic given the seed.
pub fn generate_bank<S: Scalar>(spec: &SyntheticSpec) -> Result<FeatureBank<S>, SyntheticError> {
    generate_with_source(spec, spec.seed, format!("synthetic-{}", spec.seed))
}

/// Generates `count` banks that share the spec's class means but carry
/// independent noise, standing in for independently trained backbones.
/// Bank `i` uses the derived seed `mix(spec.seed, i)`.
pub fn generate_ensemble<S: Scalar>(
    spec: &SyntheticSpec,
    count: usize,
) -> Result<Vec<FeatureBank<S>>, SyntheticError> {
    if count == 0 {
        return Err(SyntheticError::InvalidSpec(
            "ensemble needs at least one bank".into(),
        ));
    }
    (0..count)
        .map(|i| {
            let seed = derive_run_seed(spec.seed, i as u64);
            generate_with_source(spec, seed, format!("synthetic-{}-{}", spec.seed, i))
        })
        .collect()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Closed-form nearest-mean accuracy, defined for 2-way specs with pinned
/// supports: `Phi(separation / (2 * sigma_eff))`, where averaging the
/// `n_views` jittered views leaves an effective noise std of
/// `sqrt(sigma^2 + view_noise^2 / n_views)`.
pub fn oracle_accuracy(spec: &SyntheticSpec) -> Result<f64, SyntheticError> {
    spec.validate()?;
    if spec.n_classes != 2 {
        return Err(SyntheticError::UnsupportedSpec(format!(
            "closed form covers 2 classes, got {}",
            spec.n_classes
        )));
    }
    if !spec.pin_supports_to_means {
        return Err(SyntheticError::UnsupportedSpec(
            "closed form requires supports pinned to the class means".into(),
        ));
    }
    let sigma_eff =
        (spec.sigma * spec.sigma + spec.view_noise * spec.view_noise / spec.n_views as f64).sqrt();
    Ok(normal_cdf(spec.separation / (2.0 * sigma_eff)))
}
