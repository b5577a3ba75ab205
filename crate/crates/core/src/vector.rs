//! Unit vectors in the joint embedding space and the labeled sets built from them.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LluError, Result};

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// Accepted deviation of a stored unit vector's norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// A feature vector of Euclidean norm 1 (within [`UNIT_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Accepts a vector that is already unit-norm within tolerance and
    /// renormalizes it exactly.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(LluError::UnnormalizedVector { index: 0, norm });
        }
        normalize(&values)
    }

    /// Wraps values whose norm the caller has just established as 1.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        UnitVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn cosine(&self, other: &UnitVector) -> Result<f64> {
        cosine_sim(self, other)
    }

    /// The i-th standard basis vector.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        UnitVector(v)
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Plain dot product, summed in index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let norm = l2_norm(v);
    if !(norm > MIN_NORM) || !norm.is_finite() {
        return Err(LluError::ZeroVector { norm });
    }
    Ok(UnitVector(v.iter().map(|x| x / norm).collect()))
}

pub fn cosine_sim(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(dot(&a.0, &b.0))
}

/// `2ab / (a + b)`, defined as 0 when `a + b == 0`.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(LluError::DimMismatch { expected, found })
    }
}

/// Stacks vectors as the rows of a matrix.
pub fn stack_rows<'a, I>(dim: usize, rows: I) -> Array2<f64>
where
    I: IntoIterator<Item = &'a UnitVector>,
{
    let flat: Vec<f64> = rows
        .into_iter()
        .flat_map(|v| v.as_slice().iter().copied())
        .collect();
    let n = flat.len() / dim.max(1);
    Array2::from_shape_vec((n, dim), flat).expect("rows share one dimension")
}

fn validate_class_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(LluError::InvalidSet("class name list is empty".into()));
    }
    let mut seen = HashSet::new();
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(LluError::InvalidSet(format!("duplicate class name `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(LluError::InvalidSet(format!("class name `{name}` is too long")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub vector: UnitVector,
    pub label: usize,
}

/// Labeled image features for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    class_names: Vec<String>,
    records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(dim: usize, class_names: Vec<String>, records: Vec<FeatureRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(LluError::InvalidSet("dim must be positive".into()));
        }
        validate_class_names(&class_names)?;
        for r in &records {
            check_dim(dim, r.vector.dim())?;
            if r.label >= class_names.len() {
                return Err(LluError::LabelOutOfRange {
                    label: r.label,
                    n_classes: class_names.len(),
                });
            }
        }
        Ok(FeatureSet {
            dim,
            class_names,
            records,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vectors(&self) -> impl Iterator<Item = &UnitVector> {
        self.records.iter().map(|r| &r.vector)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Number of records per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Keeps only records whose label is in `classes`, relabeling them to
    /// their position within `classes`.
    pub fn restrict_to(&self, classes: &[usize]) -> Result<FeatureSet> {
        let mut remap = BTreeMap::new();
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.n_classes() {
                return Err(LluError::LabelOutOfRange {
                    label: old,
                    n_classes: self.n_classes(),
                });
            }
            remap.insert(old, new);
        }
        let names = classes.iter().map(|&c| self.class_names[c].clone()).collect();
        let records = self
            .records
            .iter()
            .filter_map(|r| {
                remap.get(&r.label).map(|&label| FeatureRecord {
                    vector: r.vector.clone(),
                    label,
                })
            })
            .collect();
        FeatureSet::new(self.dim, names, records)
    }
}

/// One text embedding per class, in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingSet {
    dim: usize,
    class_names: Vec<String>,
    vectors: Vec<UnitVector>,
}

impl ClassEmbeddingSet {
    pub fn new(dim: usize, class_names: Vec<String>, vectors: Vec<UnitVector>) -> Result<Self> {
        if dim == 0 {
            return Err(LluError::InvalidSet("dim must be positive".into()));
        }
        validate_class_names(&class_names)?;
        if vectors.len() != class_names.len() {
            return Err(LluError::InvalidSet(format!(
                "{} class names but {} vectors",
                class_names.len(),
                vectors.len()
            )));
        }
        for v in &vectors {
            check_dim(dim, v.dim())?;
        }
        Ok(ClassEmbeddingSet {
            dim,
            class_names,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn vectors(&self) -> &[UnitVector] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn subset(&self, classes: &[usize]) -> Result<ClassEmbeddingSet> {
        let mut names = Vec::with_capacity(classes.len());
        let mut vectors = Vec::with_capacity(classes.len());
        for &c in classes {
            if c >= self.len() {
                return Err(LluError::LabelOutOfRange {
                    label: c,
                    n_classes: self.len(),
                });
            }
            names.push(self.class_names[c].clone());
            vectors.push(self.vectors[c].clone());
        }
        ClassEmbeddingSet::new(self.dim, names, vectors)
    }

    pub fn matrix(&self) -> Array2<f64> {
        stack_rows(self.dim, &self.vectors)
    }
}

/// Accuracy on base classes, new classes and their harmonic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub base_accuracy: f64,
    pub new_accuracy: f64,
    pub harmonic_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_accuracy: Option<BTreeMap<String, f64>>,
}

impl Metrics {
    pub fn new(base_accuracy: f64, new_accuracy: f64) -> Self {
        Metrics {
            base_accuracy,
            new_accuracy,
            harmonic_mean: harmonic_mean(base_accuracy, new_accuracy),
            per_class_accuracy: None,
        }
    }
}
