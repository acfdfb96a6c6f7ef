//! Post-backbone few-shot classification evaluation engine.
//!
//! The engine consumes banks of already-extracted feature vectors (FVB1
//! files, one per backbone) and measures few-shot accuracy over many
//! sampled episodes. Per image it averages multiple views, concatenates
//! across backbones, centers, and projects onto the unit hypersphere; a
//! nearest-class-mean classifier handles the inductive setting and a
//! temperature-weighted soft K-means the transductive one. Results are
//! aggregated as mean accuracy with a 95% interval, with ablation toggles,
//! parameter sweeps, an imbalanced-query protocol, and a synthetic Gaussian
//! generator whose 2-way pinned-support accuracy has a closed form for
//! end-to-end verification.
//!
//! All numeric code is generic over the [`Scalar`] type; banks store 32-bit
//! floats on disk while the default instantiation (the `f64` aliases below
//! and the default type parameters on the core types) runs the arithmetic
//! at 64-bit precision.

pub mod classifiers;
pub mod evaluator;
pub mod feature_store;
pub mod preprocessing;
pub mod sampler;
pub mod scalar;
pub mod synthetic;

pub use classifiers::{Barycenters, SoftKMeansConfig};
pub use evaluator::{
    evaluate, sweep, EvalInputs, EvalSummary, PipelineConfig, QueryProtocol, SweepParam,
};
pub use feature_store::{
    load_feature_bank, validate_bank, write_feature_bank, BankError, ClassFeatures, FeatureBank,
    FeatureVector,
};
pub use preprocessing::{Mode, PreprocessStats};
pub use sampler::{sample_imbalanced_task, sample_task, ImbalanceSpec, Task};
pub use scalar::Scalar;
pub use synthetic::SyntheticSpec;

/// Pipeline-precision (64-bit) aliases of the core generic types.
pub type FeatureVector64 = feature_store::FeatureVector<f64>;
pub type FeatureBank64 = feature_store::FeatureBank<f64>;
pub type Task64 = sampler::Task<f64>;

/// Storage-precision (32-bit) aliases, matching the on-disk representation.
pub type FeatureVector32 = feature_store::FeatureVector<f32>;
pub type FeatureBank32 = feature_store::FeatureBank<f32>;
