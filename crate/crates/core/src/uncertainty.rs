//! Prediction-consistency uncertainty, uncertainty-based selection, the
//! core-dataset update, and farthest-point initial core selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, PerturbationMenu};
use crate::error::{Error, Result};
use crate::manifest::{canonical_string, write_atomic, DatasetManifest};
use crate::scalar::Scalar;

pub const DEFAULT_TAU: f64 = 0.4;
pub const DEFAULT_N_PERTURB: usize = 5;
pub const DEFAULT_CORE_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionLabel {
    pub sample_id: u64,
    pub label: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub sample_id: u64,
    /// `1 - majority / n`.
    pub sigma: f64,
    pub n: usize,
    pub majority_label: u64,
}

/// `sigma = 1 - max_c count(c) / N`; the majority label breaks ties toward
/// the smallest category id.
pub fn sigma(predictions: &[PredictionLabel]) -> Result<UncertaintyScore> {
    let first = predictions.first().ok_or(Error::Empty("prediction list"))?;
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for p in predictions {
        if p.sample_id != first.sample_id {
            return Err(Error::InvalidParameter(format!(
                "predictions mix samples {} and {}",
                first.sample_id, p.sample_id
            )));
        }
        *counts.entry(p.label).or_default() += 1;
    }
    // BTreeMap iterates ascending, so the first maximum has the smallest id.
    let (label, majority) = counts
        .iter()
        .fold((0, 0), |(bl, bc), (&l, &c)| if c > bc { (l, c) } else { (bl, bc) });
    let n = predictions.len();
    Ok(UncertaintyScore {
        sample_id: first.sample_id,
        sigma: 1.0 - majority as f64 / n as f64,
        n,
        majority_label: label,
    })
}

/// Assigns a label to the `i`-th (1-based) of `n` perturbed versions of a
/// sample.
pub trait Labeler: Sync {
    fn label(&self, sample_id: u64, i: usize, n: usize, seed: u64) -> Result<u64>;
}

impl<F> Labeler for F
where
    F: Fn(u64, usize, usize, u64) -> Result<u64> + Sync,
{
    fn label(&self, sample_id: u64, i: usize, n: usize, seed: u64) -> Result<u64> {
        self(sample_id, i, n, seed)
    }
}

/// Uncertainty of every candidate, in ascending id order.
pub fn score_candidates(
    candidates: &[u64],
    labeler: &dyn Labeler,
    n: usize,
    seed: u64,
) -> Result<Vec<UncertaintyScore>> {
    if n == 0 {
        return Err(Error::InvalidParameter("perturbation count must be at least 1".into()));
    }
    let mut ids = candidates.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.par_iter()
        .map(|&id| {
            let preds = (1..=n)
                .map(|i| {
                    labeler
                        .label(id, i, n, seed)
                        .map(|label| PredictionLabel { sample_id: id, label })
                        .map_err(|e| match e {
                            e @ Error::Predictor { .. } => e,
                            other => Error::Predictor {
                                id,
                                message: other.to_string(),
                            },
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            sigma(&preds)
        })
        .collect()
}

/// Orders by sigma descending, then id ascending.
pub fn rank_scores(scores: &mut [UncertaintyScore]) {
    scores.sort_by(|a, b| b.sigma.total_cmp(&a.sigma).then(a.sample_id.cmp(&b.sample_id)));
}

/// Candidates with `sigma > tau` (strict).
pub fn select_uncertain(
    candidates: &[u64],
    labeler: &dyn Labeler,
    tau: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<UncertaintyScore>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau {tau} outside [0, 1)")));
    }
    let mut scores = score_candidates(candidates, labeler, n, seed)?;
    scores.retain(|s| s.sigma > tau);
    rank_scores(&mut scores);
    Ok(scores)
}

/// Labels an image by the category of its highest-scoring detection, after
/// applying the `i`-th uncertainty perturbation.
pub struct DominantClassLabeler<'a, D> {
    pub manifest: &'a DatasetManifest,
    pub image_root: &'a Path,
    pub detector: D,
}

impl<D> Labeler for DominantClassLabeler<'_, D>
where
    D: Fn(&RgbImage) -> Result<Vec<(u64, f64)>> + Sync,
{
    fn label(&self, sample_id: u64, i: usize, n: usize, seed: u64) -> Result<u64> {
        let sample = self
            .manifest
            .sample(sample_id)
            .ok_or(Error::Predictor {
                id: sample_id,
                message: "not in manifest".into(),
            })?;
        let img = augment::load_rgb(&self.image_root.join(&sample.image_path))?;
        let perturbed = augment::perturb_for_uncertainty(&img, seed, sample_id, i, n)?;
        let dets = (self.detector)(&perturbed)?;
        dets.iter()
            .fold(None::<(u64, f64)>, |best, &(c, s)| match best {
                Some((bc, bs)) if bs > s || (bs == s && bc <= c) => Some((bc, bs)),
                _ => Some((c, s)),
            })
            .map(|(c, _)| c)
            .ok_or(Error::Predictor {
                id: sample_id,
                message: "no detections".into(),
            })
    }
}

/// Feature-space analogue of the uncertainty perturbations: the same
/// brightness and scale draws become an additive shift and a gain, plus
/// seeded Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturePerturbation {
    pub noise_std: f64,
    pub menu: PerturbationMenu,
}

impl Default for FeaturePerturbation {
    fn default() -> Self {
        FeaturePerturbation {
            noise_std: 0.5,
            menu: PerturbationMenu::default(),
        }
    }
}

impl FeaturePerturbation {
    pub fn apply<T: Scalar>(
        &self,
        features: &[T],
        seed: u64,
        sample_id: u64,
        i: usize,
        n: usize,
    ) -> Result<Vec<T>> {
        use rand_distr::{Distribution, StandardNormal};
        let ops = augment::uncertainty_ops(&self.menu, seed, sample_id, i, n)?;
        let mut gain = 1.0;
        let mut shift = 0.0;
        for op in ops {
            match op {
                augment::AugmentOp::Scale { factor } => gain *= factor,
                augment::AugmentOp::Brightness { delta } => shift += delta,
                _ => {}
            }
        }
        let mut rng = crate::rng::rng_for(
            seed,
            &[crate::rng::stream::FEATURE_JITTER, sample_id, i as u64],
        );
        Ok(features
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                crate::scalar::cast::<T>(x.to_f64_lossless() * gain + shift + self.noise_std * z)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreMember {
    #[serde(rename = "id")]
    pub sample_id: u64,
    pub sigma: f64,
    pub added_at: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreDataset {
    pub capacity: Option<usize>,
    /// Sorted by sigma descending, then id ascending.
    pub members: Vec<CoreMember>,
}

impl CoreDataset {
    pub fn new(capacity: Option<usize>) -> Self {
        CoreDataset {
            capacity,
            members: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.members.iter().map(|m| m.sample_id).collect()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.members.iter().any(|m| m.sample_id == id)
    }

    pub fn canonicalize(&mut self) {
        self.members.sort_by(|a, b| {
            b.sigma
                .total_cmp(&a.sigma)
                .then(a.sample_id.cmp(&b.sample_id))
        });
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in &self.members {
            if !seen.insert(m.sample_id) {
                return Err(Error::DuplicateId {
                    what: "core member",
                    id: m.sample_id,
                });
            }
            if !(0.0..=1.0).contains(&m.sigma) {
                return Err(Error::InvalidRecord {
                    id: m.sample_id,
                    message: format!("sigma {} outside [0, 1]", m.sigma),
                });
            }
        }
        if let Some(cap) = self.capacity {
            if self.members.len() > cap {
                return Err(Error::Invariant(format!(
                    "core holds {} members over capacity {cap}",
                    self.members.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.canonicalize();
        c.validate()?;
        canonical_string(&c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::manifest::read_to_string(path)?;
        let c: CoreDataset = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        c.validate()?;
        Ok(c)
    }
}

/// Union by id; members already present are kept as they are. Over
/// capacity, the lowest-sigma members are evicted (ties: oldest iteration,
/// then largest id).
pub fn update_core(core: &CoreDataset, selected: &[UncertaintyScore], t: u64) -> CoreDataset {
    let mut members: BTreeMap<u64, CoreMember> =
        core.members.iter().map(|m| (m.sample_id, *m)).collect();
    for s in selected {
        members.entry(s.sample_id).or_insert(CoreMember {
            sample_id: s.sample_id,
            sigma: s.sigma,
            added_at: t,
        });
    }
    let mut members: Vec<CoreMember> = members.into_values().collect();
    if let Some(cap) = core.capacity {
        if members.len() > cap {
            // Eviction order: lowest sigma, then oldest, then largest id first.
            members.sort_by(|a, b| {
                a.sigma
                    .total_cmp(&b.sigma)
                    .then(a.added_at.cmp(&b.added_at))
                    .then(b.sample_id.cmp(&a.sample_id))
            });
            let excess = members.len() - cap;
            members.drain(..excess);
        }
    }
    let mut out = CoreDataset {
        capacity: core.capacity,
        members,
    };
    out.canonicalize();
    out
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point selection of `k` points. The first pick is the point
/// nearest the centroid; each later pick maximizes the distance to the
/// chosen set. Ties go to the smaller id. Returns ids in pick order.
pub fn farthest_point_selection<T: Scalar>(points: &[(u64, &[T])], k: usize) -> Result<Vec<u64>> {
    if k > points.len() {
        return Err(Error::TooMany {
            requested: k,
            population: points.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut pts: Vec<(u64, &[T])> = points.to_vec();
    pts.sort_by_key(|p| p.0);
    let dim = pts[0].1.len();
    if let Some(p) = pts.iter().find(|p| p.1.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.1.len(),
        });
    }
    let n = crate::scalar::cast::<T>(pts.len() as f64);
    let centroid: Vec<T> = (0..dim)
        .map(|j| pts.iter().map(|p| p.1[j]).sum::<T>() / n)
        .collect();
    let argmax = |vals: &[T], chosen: &[bool], want_min: bool| -> usize {
        let mut best: Option<usize> = None;
        for (i, &v) in vals.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if (want_min && v < vals[b]) || (!want_min && v > vals[b]) => Some(i),
                keep => keep,
            };
        }
        best.expect("unchosen point exists")
    };
    let mut chosen = vec![false; pts.len()];
    let to_centroid: Vec<T> = pts.iter().map(|p| sq_dist(p.1, &centroid)).collect();
    let first = argmax(&to_centroid, &chosen, true);
    chosen[first] = true;
    let mut picks = vec![pts[first].0];
    let mut nearest: Vec<T> = pts.par_iter().map(|p| sq_dist(p.1, pts[first].1)).collect();
    while picks.len() < k {
        let next = argmax(&nearest, &chosen, false);
        chosen[next] = true;
        picks.push(pts[next].0);
        let anchor = pts[next].1;
        nearest
            .par_iter_mut()
            .zip(pts.par_iter())
            .for_each(|(d, p)| *d = d.min(sq_dist(p.1, anchor)));
    }
    Ok(picks)
}

/// Initial core over an embedding table restricted to the manifest samples.
/// Sigma is unknown before any model exists and is recorded as 0.
pub fn select_initial_core<T: Scalar>(
    manifest: &DatasetManifest,
    embeddings: &crate::scoring::EmbeddingTable<T>,
    k: usize,
    capacity: Option<usize>,
) -> Result<CoreDataset> {
    let points: Vec<(u64, &[T])> = manifest
        .sample_ids()
        .into_iter()
        .map(|id| Ok((id, embeddings.get(id).ok_or(Error::MissingEmbedding(id))?)))
        .collect::<Result<_>>()?;
    let picks = farthest_point_selection(&points, k)?;
    let mut core = CoreDataset {
        capacity,
        members: picks
            .into_iter()
            .map(|id| CoreMember {
                sample_id: id,
                sigma: 0.0,
                added_at: 0,
            })
            .collect(),
    };
    if let Some(cap) = capacity {
        core.members.truncate(cap);
    }
    core.canonicalize();
    Ok(core)
}
