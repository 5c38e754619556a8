//! Dataset containers: labeled calibration pool, ordered candidate batch,
//! and the hidden ground truth kept apart from the inference path.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in feature space. All coordinates are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature vector".into(),
            });
        }
        Ok(Self(values))
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

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

fn common_dimension(features: &[FeatureVector], context: &str) -> Result<usize> {
    let d = features
        .first()
        .map(FeatureVector::dim)
        .ok_or_else(|| Error::InvalidParameter(format!("{context} has no rows")))?;
    if let Some(bad) = features.iter().find(|f| f.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.dim(),
        });
    }
    Ok(d)
}

pub(crate) fn check_len(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch {
            context: context.into(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Labeled calibration data. `labels[i] == true` marks a hit (label 1).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    features: Vec<FeatureVector>,
    labels: Vec<bool>,
    predictor_scores: Option<Vec<f64>>,
    dimension: usize,
}

impl LabeledPool {
    pub fn new(
        features: Vec<FeatureVector>,
        labels: Vec<bool>,
        predictor_scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        let dimension = common_dimension(&features, "calibration pool")?;
        check_len("calibration labels", features.len(), labels.len())?;
        if let Some(s) = &predictor_scores {
            check_len("calibration predictor scores", features.len(), s.len())?;
        }
        Ok(Self {
            features,
            labels,
            predictor_scores,
            dimension,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn predictor_scores(&self) -> Option<&[f64]> {
        self.predictor_scores.as_deref()
    }

    /// Indices of rows with label 0, in row order.
    pub fn inactive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labels[i]).collect()
    }

    pub fn n_inactive(&self) -> usize {
        self.labels.iter().filter(|&&y| !y).count()
    }

    /// Keeps the rows at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.predictor_scores
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
        )
    }
}

/// Generated candidates in generation order. The order is fixed at
/// construction; prefixes are the unit of nested testing.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    features: Vec<FeatureVector>,
    predictor_scores: Vec<f64>,
    dimension: usize,
}

impl CandidateBatch {
    pub fn new(features: Vec<FeatureVector>, predictor_scores: Vec<f64>) -> Result<Self> {
        let dimension = common_dimension(&features, "candidate batch")?;
        check_len("candidate predictor scores", features.len(), predictor_scores.len())?;
        Ok(Self {
            features,
            predictor_scores,
            dimension,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn predictor_scores(&self) -> &[f64] {
        &self.predictor_scores
    }

    /// The first `k` candidates.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidParameter(format!(
                "prefix size {k} outside 1..={}",
                self.len()
            )));
        }
        Self::new(
            self.features[..k].to_vec(),
            self.predictor_scores[..k].to_vec(),
        )
    }

    /// Keeps the candidates at `indices`; indices must be increasing so the
    /// generation order survives.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "candidate selection must be strictly increasing".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidIndex {
                index: bad,
                size: self.len(),
            });
        }
        Self::new(
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.predictor_scores[i]).collect(),
        )
    }
}

/// True labels of generated candidates. Only evaluation code reads these;
/// nothing on the certification path accepts them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<bool>);

impl HiddenLabels {
    pub fn new(labels: Vec<bool>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn any_hit(&self) -> bool {
        self.0.iter().any(|&y| y)
    }

    pub fn hit_in_prefix(&self, k: usize) -> bool {
        self.0.iter().take(k).any(|&y| y)
    }

    pub fn hit_among(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.0.get(i).copied().unwrap_or(false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    DimensionMismatch { pool: usize, batch: usize },
    NonFinite { location: String },
    EmptyInactiveSet,
    MissingPredictorScores,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimensionMismatch { pool, batch } => {
                write!(f, "dimension mismatch: pool d={pool}, batch d={batch}")
            }
            Self::NonFinite { location } => write!(f, "non-finite value at {location}"),
            Self::EmptyInactiveSet => write!(f, "empty inactive set"),
            Self::MissingPredictorScores => write!(f, "missing predictor scores in pool"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub n: usize,
    pub n0: usize,
    pub batch_size: usize,
    pub issues: Vec<ValidationIssue>,
}

/// Checks a pool/batch pair for everything the p-value code needs.
pub fn validate_pair(pool: &LabeledPool, batch: &CandidateBatch) -> ValidationReport {
    let mut issues = Vec::new();
    if pool.dimension() != batch.dimension() {
        issues.push(ValidationIssue::DimensionMismatch {
            pool: pool.dimension(),
            batch: batch.dimension(),
        });
    }
    match pool.predictor_scores() {
        None => issues.push(ValidationIssue::MissingPredictorScores),
        Some(s) => {
            if let Some(i) = s.iter().position(|v| !v.is_finite()) {
                issues.push(ValidationIssue::NonFinite {
                    location: format!("calibration row {i}, column mu"),
                });
            }
        }
    }
    if let Some(j) = batch.predictor_scores().iter().position(|v| !v.is_finite()) {
        issues.push(ValidationIssue::NonFinite {
            location: format!("candidate row {j}, column mu"),
        });
    }
    let n0 = pool.n_inactive();
    if n0 == 0 {
        issues.push(ValidationIssue::EmptyInactiveSet);
    }
    ValidationReport {
        ok: issues.is_empty(),
        n: pool.len(),
        n0,
        batch_size: batch.len(),
        issues,
    }
}
