//! Embedding-similarity scoring of samples against scenario prompts, and
//! extraction of corner-case subsets with per-sample confidence.

pub mod embfile;
pub mod remote;
pub mod stub;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::scalar::{cast, Scalar};

pub use embfile::{read_embeddings, write_embeddings, EmbeddingFormat};

/// Tolerance on the L2 norm of stored vectors.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

/// Unit-norm vectors of one fixed dimension, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    dim: usize,
    kind: EmbeddingKind,
    entries: BTreeMap<u64, Vec<T>>,
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn normalize<T: Scalar>(v: &mut [T]) -> Result<()> {
    let n = l2_norm(v);
    if n == T::zero() || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x = *x / n);
    Ok(())
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(dim: usize, kind: EmbeddingKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dim must be positive".into()));
        }
        Ok(EmbeddingTable {
            dim,
            kind,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&[T]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[T])> {
        self.entries.iter().map(|(&id, v)| (id, v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    /// Inserts a vector that must already be unit norm.
    pub fn insert(&mut self, id: u64, vector: Vec<T>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let norm = l2_norm(&vector).to_f64_lossless();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::NotUnitNorm { id, norm });
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn insert_normalized(&mut self, id: u64, mut vector: Vec<T>) -> Result<()> {
        normalize(&mut vector)?;
        self.insert(id, vector)
    }

    /// Re-checks every invariant (used after decoding untrusted input).
    pub fn validate(&self) -> Result<()> {
        for (&id, v) in &self.entries {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
            let norm = l2_norm(v).to_f64_lossless();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::NotUnitNorm { id, norm });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            dim: self.dim,
            kind: self.kind,
            entries: self
                .entries
                .iter()
                .map(|(&id, v)| (id, v.iter().map(|x| cast::<U>(x.to_f64_lossless())).collect()))
                .collect(),
        }
    }

    pub(crate) fn from_parts(
        dim: usize,
        kind: EmbeddingKind,
        entries: BTreeMap<u64, Vec<T>>,
    ) -> Self {
        EmbeddingTable { dim, kind, entries }
    }

    /// Folds another table in; dims and kinds must agree.
    pub fn extend(&mut self, other: EmbeddingTable<T>) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.entries.extend(other.entries);
        Ok(())
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroVector);
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// How similarities to several prompts of one scenario are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone)]
pub struct PromptSet<T> {
    pub scenario_name: String,
    pub prompts: Vec<String>,
    /// Keyed by prompt index.
    pub prompt_embeddings: EmbeddingTable<T>,
}

/// On-disk prompt list: `{"scenario": str, "prompts": [str]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFile {
    pub scenario: String,
    pub prompts: Vec<String>,
}

impl PromptFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::manifest::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

impl<T: Scalar> PromptSet<T> {
    pub fn new(
        scenario_name: impl Into<String>,
        prompts: Vec<String>,
        prompt_embeddings: EmbeddingTable<T>,
    ) -> Result<Self> {
        let scenario_name = scenario_name.into();
        if scenario_name.is_empty() {
            return Err(Error::Empty("scenario name"));
        }
        if prompts.is_empty() {
            return Err(Error::Empty("prompt set"));
        }
        if prompt_embeddings.len() != prompts.len()
            || (0..prompts.len() as u64).any(|i| prompt_embeddings.get(i).is_none())
        {
            return Err(Error::InvalidParameter(format!(
                "{} prompts but {} prompt embeddings",
                prompts.len(),
                prompt_embeddings.len()
            )));
        }
        Ok(PromptSet {
            scenario_name,
            prompts,
            prompt_embeddings,
        })
    }

    pub fn dim(&self) -> usize {
        self.prompt_embeddings.dim()
    }

    fn vectors(&self) -> impl Iterator<Item = &[T]> {
        (0..self.prompts.len() as u64).filter_map(|i| self.prompt_embeddings.get(i))
    }
}

/// Confidence `C = (s + 1) / 2` where `s` aggregates the cosine similarities
/// of the sample to every prompt.
pub fn confidence_score<T: Scalar>(
    sample: &[T],
    prompts: &PromptSet<T>,
    aggregation: Aggregation,
) -> Result<T> {
    let sims = prompts
        .vectors()
        .map(|p| cosine_similarity(sample, p))
        .collect::<Result<Vec<T>>>()?;
    let s = match aggregation {
        Aggregation::Max => sims.iter().copied().fold(None, |acc: Option<T>, x| {
            Some(acc.map_or(x, |a| a.max(x)))
        }),
        Aggregation::Mean if !sims.is_empty() => {
            Some(sims.iter().copied().sum::<T>() / cast::<T>(sims.len() as f64))
        }
        Aggregation::Mean => None,
    }
    .ok_or(Error::Empty("prompt set"))?;
    let half = cast::<T>(0.5);
    Ok(((s + T::one()) * half).max(T::zero()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    /// Keep samples with `C >= threshold`.
    Threshold(f64),
    /// Keep the `k` highest-confidence samples.
    TopK(usize),
}

impl Default for ExtractionRule {
    fn default() -> Self {
        ExtractionRule::Threshold(DEFAULT_THRESHOLD)
    }
}

/// Arbitrary default: with the stub scorer, random unit vectors put `C`
/// near 0.5, so this keeps roughly the upper two thirds of a pool.
pub const DEFAULT_THRESHOLD: f64 = 0.48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub sample_id: u64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerCaseSet {
    pub scenario_name: String,
    /// Sorted by confidence descending, then id ascending.
    pub members: Vec<Member>,
    pub source_manifest: String,
}

impl CornerCaseSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> std::collections::BTreeSet<u64> {
        self.members.iter().map(|m| m.sample_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.members {
            if !seen.insert(m.sample_id) {
                return Err(Error::DuplicateId {
                    what: "corner-case member",
                    id: m.sample_id,
                });
            }
            if !(0.0..=1.0).contains(&m.confidence) {
                return Err(Error::InvalidRecord {
                    id: m.sample_id,
                    message: format!("confidence {} outside [0, 1]", m.confidence),
                });
            }
        }
        Ok(())
    }
}

/// Orders by confidence descending, ties by ascending id.
pub fn rank_members(members: &mut [Member]) {
    members.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.sample_id.cmp(&b.sample_id))
    });
}

/// Confidence of every manifest sample, in ascending id order.
pub fn score_samples<T: Scalar>(
    manifest: &DatasetManifest,
    embeddings: &EmbeddingTable<T>,
    prompts: &PromptSet<T>,
    aggregation: Aggregation,
) -> Result<Vec<Member>> {
    if embeddings.dim() != prompts.dim() {
        return Err(Error::DimensionMismatch {
            expected: prompts.dim(),
            got: embeddings.dim(),
        });
    }
    let ids = manifest.sample_ids();
    ids.par_iter()
        .map(|&id| {
            let v = embeddings.get(id).ok_or(Error::MissingEmbedding(id))?;
            let c = confidence_score(v, prompts, aggregation)?;
            Ok(Member {
                sample_id: id,
                confidence: c.to_f64_lossless(),
            })
        })
        .collect()
}

pub fn extract_corner_cases<T: Scalar>(
    manifest: &DatasetManifest,
    embeddings: &EmbeddingTable<T>,
    prompts: &PromptSet<T>,
    rule: ExtractionRule,
    aggregation: Aggregation,
    source_manifest: impl Into<String>,
) -> Result<CornerCaseSet> {
    let mut members = score_samples(manifest, embeddings, prompts, aggregation)?;
    rank_members(&mut members);
    match rule {
        ExtractionRule::Threshold(theta) => {
            if !theta.is_finite() {
                return Err(Error::InvalidParameter(format!("threshold {theta}")));
            }
            members.retain(|m| m.confidence >= theta);
        }
        ExtractionRule::TopK(k) => {
            if k > members.len() {
                return Err(Error::TooMany {
                    requested: k,
                    population: members.len(),
                });
            }
            members.truncate(k);
        }
    }
    Ok(CornerCaseSet {
        scenario_name: prompts.scenario_name.clone(),
        members,
        source_manifest: source_manifest.into(),
    })
}

/// Copies each member's confidence into the manifest and restricts it to the
/// members.
pub fn corner_manifest(manifest: &DatasetManifest, set: &CornerCaseSet) -> DatasetManifest {
    let mut out = manifest.subset(&set.ids());
    let conf: BTreeMap<u64, f64> = set
        .members
        .iter()
        .map(|m| (m.sample_id, m.confidence))
        .collect();
    for s in &mut out.samples {
        s.confidence = conf.get(&s.id).copied();
        s.tags.insert(format!("scenario:{}", set.scenario_name));
    }
    out.meta
        .insert("scenario".into(), set.scenario_name.clone());
    out
}
