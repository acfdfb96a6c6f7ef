//! Immutable feature banks and the FVB1 on-disk format.
//!
//! A bank holds the extracted feature vectors of one backbone: for every
//! class, a list of images, and for every image a fixed number of per-view
//! vectors (several crops of the same image, or a single global view).
//! Banks are read-only after construction and safe to share across worker
//! threads without synchronization.
//!
//! FVB1 layout, little-endian throughout:
//!
//! ```text
//! magic      4 bytes   "FVB1"
//! version    u32       1
//! dim        u32       feature dimension d
//! n_views    u32       views per image
//! n_classes  u32
//! per class:
//!   class_id u32
//!   n_images u32
//!   payload  n_images * n_views * dim  IEEE-754 f32
//! ```
//!
//! Images are contiguous within a class and views contiguous within an
//! image. Values are stored at 32-bit precision; the rest of the engine
//! widens them to its working scalar (`f64` by default) on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{cast, upcast, Scalar};

/// Magic bytes opening every FVB1 file.
pub const MAGIC: [u8; 4] = *b"FVB1";

/// Current format version.
pub const FORMAT_VERSION: u32 = 1;

/// Human-readable byte layout, printed by the `fmt-spec` CLI subcommand so
/// external exporters can produce banks without reading this source.
pub const FORMAT_SPEC: &str = "\
FVB1 feature bank format (little-endian)

header:
  offset  0   4 bytes   magic \"FVB1\"
  offset  4   u32       format version, must be 1
  offset  8   u32       dim       (feature dimension, >= 1)
  offset 12   u32       n_views   (views per image, >= 1)
  offset 16   u32       n_classes (>= 1)

then for each class, in order:
  u32       class_id  (unique within the bank)
  u32       n_images  (>= 1)
  payload   n_images * n_views * dim  IEEE-754 binary32 values,
            images contiguous, views contiguous within an image,
            coordinates contiguous within a view

All values must be finite (no NaN or infinities). No padding, no footer.

optional sidecar \"<file>.json\": {\"source_id\": <string>,
\"class_names\": {<class_id>: <string>, ...}} -- informational only.
";

/// Errors raised by bank construction and I/O.
#[derive(Debug, Error)]
pub enum BankError {
    #[error("bad magic bytes (expected \"FVB1\")")]
    BadMagic,
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("payload size disagrees with header: expected {expected} bytes, found {found}")]
    DimensionMismatch { expected: u64, found: u64 },
    #[error("non-finite value at class {class_id}, image {image}, view {view}, coordinate {coord}")]
    NonFiniteValue {
        class_id: u32,
        image: usize,
        view: usize,
        coord: usize,
    },
    #[error("invalid bank: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A dense embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S = f64> {
    values: Vec<S>,
}

impl<S: Scalar> FeatureVector<S> {
    pub fn new(values: Vec<S>) -> Self {
        Self { values }
    }

    /// Builds a vector from `f64` coordinates, casting into the working scalar.
    pub fn from_f64(values: &[f64]) -> Self {
        Self::new(values.iter().map(|&x| cast(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> S {
        self.values
            .iter()
            .fold(S::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Exact squared Euclidean distance. Panics if dimensions differ;
    /// callers expose that as a typed error before getting here.
    pub fn squared_distance(&self, other: &Self) -> S {
        assert_eq!(self.dim(), other.dim(), "feature dimension mismatch");
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(S::zero(), |acc, (&a, &b)| {
                let d = a - b;
                acc + d * d
            })
    }
}

impl<S> Deref for FeatureVector<S> {
    type Target = [S];

    fn deref(&self) -> &[S] {
        &self.values
    }
}

/// All feature vectors of one class: `images[i][v]` is view `v` of image `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatures<S = f64> {
    class_id: u32,
    images: Vec<Vec<FeatureVector<S>>>,
}

impl<S: Scalar> ClassFeatures<S> {
    pub fn new(class_id: u32, images: Vec<Vec<FeatureVector<S>>>) -> Self {
        Self { class_id, images }
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn images(&self) -> &[Vec<FeatureVector<S>>] {
        &self.images
    }

    /// The views of one image.
    pub fn views(&self, image: usize) -> &[FeatureVector<S>] {
        &self.images[image]
    }
}

/// Class-indexed collection of per-image, per-view feature vectors for one
/// backbone. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank<S = f64> {
    dim: usize,
    n_views: usize,
    source_id: String,
    classes: Vec<ClassFeatures<S>>,
}

impl<S: Scalar> FeatureBank<S> {
    /// Builds a bank, rejecting anything that violates the bank invariants.
    pub fn new(
        dim: usize,
        n_views: usize,
        source_id: impl Into<String>,
        classes: Vec<ClassFeatures<S>>,
    ) -> Result<Self, BankError> {
        let bank = Self::from_parts_unchecked(dim, n_views, source_id, classes);
        bank.check()?;
        Ok(bank)
    }

    /// Builds a bank without checking invariants. Intended for tools and
    /// tests that need to hold invalid data long enough to validate it.
    pub fn from_parts_unchecked(
        dim: usize,
        n_views: usize,
        source_id: impl Into<String>,
        classes: Vec<ClassFeatures<S>>,
    ) -> Self {
        Self {
            dim,
            n_views,
            source_id: source_id.into(),
            classes,
        }
    }

    fn check(&self) -> Result<(), BankError> {
        match validate_bank(self).into_iter().next() {
            None => Ok(()),
            Some(Violation::NonFinite {
                class_id,
                image,
                view,
                coord,
            }) => Err(BankError::NonFiniteValue {
                class_id,
                image,
                view,
                coord,
            }),
            Some(v) => Err(BankError::Invalid(v.to_string())),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn set_source_id(&mut self, source_id: impl Into<String>) {
        self.source_id = source_id.into();
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassFeatures<S>] {
        &self.classes
    }

    pub fn class(&self, position: usize) -> &ClassFeatures<S> {
        &self.classes[position]
    }

    pub fn total_images(&self) -> usize {
        self.classes.iter().map(|c| c.n_images()).sum()
    }
}

/// One invariant violation found in a bank. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroDimension,
    ZeroViews,
    NoClasses,
    DuplicateClassId {
        class_id: u32,
    },
    EmptyClass {
        class_id: u32,
    },
    WrongViewCount {
        class_id: u32,
        image: usize,
        expected: usize,
        found: usize,
    },
    WrongDimension {
        class_id: u32,
        image: usize,
        view: usize,
        expected: usize,
        found: usize,
    },
    NonFinite {
        class_id: u32,
        image: usize,
        view: usize,
        coord: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension => write!(f, "feature dimension is zero"),
            Violation::ZeroViews => write!(f, "views-per-image is zero"),
            Violation::NoClasses => write!(f, "bank contains no classes"),
            Violation::DuplicateClassId { class_id } => {
                write!(f, "class id {class_id} appears more than once")
            }
            Violation::EmptyClass { class_id } => {
                write!(f, "class {class_id} holds no images")
            }
            Violation::WrongViewCount {
                class_id,
                image,
                expected,
                found,
            } => write!(
                f,
                "class {class_id}, image {image}: {found} views, bank declares {expected}"
            ),
            Violation::WrongDimension {
                class_id,
                image,
                view,
                expected,
                found,
            } => write!(
                f,
                "class {class_id}, image {image}, view {view}: dimension {found}, bank declares {expected}"
            ),
            Violation::NonFinite {
                class_id,
                image,
                view,
                coord,
            } => write!(
                f,
                "class {class_id}, image {image}, view {view}, coordinate {coord}: non-finite value"
            ),
        }
    }
}

/// Checks every bank invariant and reports all violations found.
/// The report is empty iff the bank is valid.
pub fn validate_bank<S: Scalar>(bank: &FeatureBank<S>) -> Vec<Violation> {
    let mut out = Vec::new();
    if bank.dim == 0 {
        out.push(Violation::ZeroDimension);
    }
    if bank.n_views == 0 {
        out.push(Violation::ZeroViews);
    }
    if bank.classes.is_empty() {
        out.push(Violation::NoClasses);
    }
    let mut seen = BTreeSet::new();
    for class in &bank.classes {
        if !seen.insert(class.class_id) {
            out.push(Violation::DuplicateClassId {
                class_id: class.class_id,
            });
        }
        if class.images.is_empty() {
            out.push(Violation::EmptyClass {
                class_id: class.class_id,
            });
        }
        for (image, views) in class.images.iter().enumerate() {
            if views.len() != bank.n_views {
                out.push(Violation::WrongViewCount {
                    class_id: class.class_id,
                    image,
                    expected: bank.n_views,
                    found: views.len(),
                });
            }
            for (view, vector) in views.iter().enumerate() {
                if vector.dim() != bank.dim {
                    out.push(Violation::WrongDimension {
                        class_id: class.class_id,
                        image,
                        view,
                        expected: bank.dim,
                        found: vector.dim(),
                    });
                }
                for (coord, value) in vector.iter().enumerate() {
                    if !value.is_finite() {
                        out.push(Violation::NonFinite {
                            class_id: class.class_id,
                            image,
                            view,
                            coord,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Cross-bank incompatibility found when preparing an ensemble.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnsembleViolation {
    /// Class-id sets differ; holds the symmetric difference.
    ClassSetMismatch {
        bank: usize,
        missing: Vec<u32>,
        extra: Vec<u32>,
    },
    ImageCountMismatch {
        bank: usize,
        class_id: u32,
        expected: usize,
        found: usize,
    },
}

impl fmt::Display for EnsembleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleViolation::ClassSetMismatch {
                bank,
                missing,
                extra,
            } => write!(
                f,
                "bank {bank}: class set differs from bank 0 (missing {missing:?}, extra {extra:?})"
            ),
            EnsembleViolation::ImageCountMismatch {
                bank,
                class_id,
                expected,
                found,
            } => write!(
                f,
                "bank {bank}, class {class_id}: {found} images, bank 0 has {expected}"
            ),
        }
    }
}

/// Checks that banks can be concatenated image-by-image: identical class-id
/// sets (in the same order is not required) and identical per-class image
/// counts. Banks may differ in dimension and views-per-image.
pub fn ensemble_compatibility<S: Scalar>(banks: &[FeatureBank<S>]) -> Vec<EnsembleViolation> {
    let mut out = Vec::new();
    let Some(first) = banks.first() else {
        return out;
    };
    let reference: BTreeMap<u32, usize> = first
        .classes
        .iter()
        .map(|c| (c.class_id, c.n_images()))
        .collect();
    for (bank_idx, bank) in banks.iter().enumerate().skip(1) {
        let ids: BTreeSet<u32> = bank.classes.iter().map(|c| c.class_id).collect();
        let ref_ids: BTreeSet<u32> = reference.keys().copied().collect();
        let missing: Vec<u32> = ref_ids.difference(&ids).copied().collect();
        let extra: Vec<u32> = ids.difference(&ref_ids).copied().collect();
        if !missing.is_empty() || !extra.is_empty() {
            out.push(EnsembleViolation::ClassSetMismatch {
                bank: bank_idx,
                missing,
                extra,
            });
        }
        for class in &bank.classes {
            if let Some(&expected) = reference.get(&class.class_id) {
                if class.n_images() != expected {
                    out.push(EnsembleViolation::ImageCountMismatch {
                        bank: bank_idx,
                        class_id: class.class_id,
                        expected,
                        found: class.n_images(),
                    });
                }
            }
        }
    }
    out
}

/// Sidecar manifest carried next to a bank file. Informational only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub source_id: String,
    #[serde(default)]
    pub class_names: BTreeMap<u32, String>,
}

/// Path of the sidecar manifest for a bank file (`x.fvb` -> `x.fvb.json`).
pub fn manifest_path(bank_path: &Path) -> PathBuf {
    let mut name = bank_path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_manifest(bank_path: &Path, manifest: &BankManifest) -> Result<(), BankError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| BankError::Invalid(format!("manifest serialization: {e}")))?;
    fs::write(manifest_path(bank_path), json)?;
    Ok(())
}

pub fn load_manifest(bank_path: &Path) -> Result<Option<BankManifest>, BankError> {
    let path = manifest_path(bank_path);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let manifest = serde_json::from_str(&text)
        .map_err(|e| BankError::Invalid(format!("manifest parse: {e}")))?;
    Ok(Some(manifest))
}

/// Serializes a bank to the FVB1 format plus its sidecar manifest.
/// The bank is re-validated first; storage is 32-bit, so callers holding
/// wider scalars are expected to keep values 32-bit representable.
pub fn write_feature_bank<S: Scalar>(bank: &FeatureBank<S>, path: &Path) -> Result<(), BankError> {
    bank.check()?;
    let payload_len: usize = bank.total_images() * bank.n_views * bank.dim * 4;
    let mut buf = Vec::with_capacity(20 + bank.n_classes() * 8 + payload_len);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.n_views as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.n_classes() as u32).to_le_bytes());
    for class in bank.classes() {
        buf.extend_from_slice(&class.class_id().to_le_bytes());
        buf.extend_from_slice(&(class.n_images() as u32).to_le_bytes());
        for views in class.images() {
            for vector in views {
                for &value in vector.iter() {
                    buf.extend_from_slice(&(upcast(value) as f32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf)?;
    write_manifest(
        path,
        &BankManifest {
            source_id: bank.source_id().to_string(),
            class_names: BTreeMap::new(),
        },
    )?;
    Ok(())
}

/// Loads an FVB1 bank, widening stored f32 values into the working scalar.
/// The returned bank satisfies every bank invariant; `source_id` comes from
/// the sidecar manifest when present, the file stem otherwise.
pub fn load_feature_bank<S: Scalar>(path: &Path) -> Result<FeatureBank<S>, BankError> {
    let (bank, violations) = load_feature_bank_lenient(path)?;
    match violations.into_iter().next() {
        None => Ok(bank),
        Some(Violation::NonFinite {
            class_id,
            image,
            view,
            coord,
        }) => Err(BankError::NonFiniteValue {
            class_id,
            image,
            view,
            coord,
        }),
        Some(v) => Err(BankError::Invalid(v.to_string())),
    }
}

/// Loads a structurally well-formed bank without enforcing value-level
/// invariants, returning the violation report alongside. Used by the
/// `validate` tooling, which must inspect broken banks instead of refusing
/// to open them.
pub fn load_feature_bank_lenient<S: Scalar>(
    path: &Path,
) -> Result<(FeatureBank<S>, Vec<Violation>), BankError> {
    let bytes = fs::read(path)?;
    let mut bank = parse_bank(&bytes)?;
    match load_manifest(path)? {
        Some(manifest) => bank.set_source_id(manifest.source_id),
        None => bank.set_source_id(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ),
    }
    let violations = validate_bank(&bank);
    Ok((bank, violations))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], BankError> {
        if self.buf.len() - self.pos < n {
            return Err(BankError::Truncated(what));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u32(&mut self, what: &'static str) -> Result<u32, BankError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn parse_bank<S: Scalar>(bytes: &[u8]) -> Result<FeatureBank<S>, BankError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(BankError::BadMagic);
    }
    let version = cur.take_u32("version")?;
    if version != FORMAT_VERSION {
        return Err(BankError::UnsupportedVersion(version));
    }
    let dim = cur.take_u32("dim")? as usize;
    let n_views = cur.take_u32("n_views")? as usize;
    let n_classes = cur.take_u32("n_classes")? as usize;

    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let class_id = cur.take_u32("class record header")?;
        let n_images = cur.take_u32("class record header")? as usize;
        let needed = n_images
            .checked_mul(n_views)
            .and_then(|x| x.checked_mul(dim))
            .and_then(|x| x.checked_mul(4))
            .ok_or(BankError::DimensionMismatch {
                expected: u64::MAX,
                found: cur.remaining() as u64,
            })?;
        if cur.remaining() < needed {
            return Err(BankError::DimensionMismatch {
                expected: needed as u64,
                found: cur.remaining() as u64,
            });
        }
        let payload = cur.take(needed, "class payload")?;
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut images = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let mut views = Vec::with_capacity(n_views);
            for _ in 0..n_views {
                let values: Vec<S> = (&mut floats)
                    .take(dim)
                    .map(|x| cast(f64::from(x)))
                    .collect();
                views.push(FeatureVector::new(values));
            }
            images.push(views);
        }
        classes.push(ClassFeatures::new(class_id, images));
    }
    if cur.remaining() != 0 {
        return Err(BankError::DimensionMismatch {
            expected: 0,
            found: cur.remaining() as u64,
        });
    }
    Ok(FeatureBank::from_parts_unchecked(
        dim, n_views, "", classes,
    ))
}
