//! The iterative corner-case learning loop.
//!
//! Each iteration curates the incoming pool (extract, partition, augment the
//! train split), trains on `core ∪ corner-train`, evaluates every task seen
//! so far plus the base task, then adds the uncertain train/val samples to
//! the core dataset. Iterations are persisted under
//! `<out>/runs/<name>/iter_<t>/` and the run can resume from `state.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentOutput, AugmentPolicy, AugmentationPlan};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, forgetting_report, Detection, ForgettingReport, GroundTruth, MetricReport};
use crate::learner::{FeatureDataset, FeatureSample, Learner, SoftmaxClassifier, TrainConfig};
use crate::manifest::{canonical_string, load_manifest, save_manifest, write_atomic, DatasetManifest, Split, SplitAssignment};
use crate::partition::{mean_partition, AssignmentFile, PartitionPolicy};
use crate::rng::{self, stream};
use crate::scoring::read_embeddings;
use crate::scoring::remote::{requests_for, RemoteScorer};
use crate::scoring::stub::{self, StubScorer};
use crate::scoring::{
    corner_manifest, extract_corner_cases, Aggregation, CornerCaseSet, EmbeddingKind, EmbeddingTable,
    ExtractionRule, Member, PromptFile, PromptSet, DEFAULT_THRESHOLD,
};
use crate::uncertainty::{
    farthest_point_selection, score_candidates, select_uncertain, update_core, CoreDataset, CoreMember,
    FeaturePerturbation, UncertaintyScore, DEFAULT_CORE_CAPACITY, DEFAULT_N_PERTURB, DEFAULT_TAU,
};

pub const STATE_VERSION: u32 = 1;
pub const STATUS_INITIALIZED: &str = "initialized";
pub const STATUS_COMPLETED: &str = "completed";
pub const STATUS_NO_MATCH: &str = "skipped: no corner cases matched";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerSource {
    #[default]
    Stub,
    File,
    Remote,
}

impl std::str::FromStr for ScorerSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(ScorerSource::Stub),
            "file" => Ok(ScorerSource::File),
            "remote" => Ok(ScorerSource::Remote),
            other => Err(Error::InvalidParameter(format!("unknown scorer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub source: ScorerSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Image embeddings (EMB1 or EMB1-JSON) for the `file` source.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub stub_dim: usize,
    pub batch_size: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            source: ScorerSource::Stub,
            url: None,
            embeddings: None,
            stub_dim: stub::DEFAULT_DIM,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub aggregation: Aggregation,
}

impl ExtractionConfig {
    pub fn rule(&self) -> Result<ExtractionRule> {
        match (self.threshold, self.top_k) {
            (Some(_), Some(_)) => Err(Error::InvalidParameter(
                "extraction takes a threshold or a top_k, not both".into(),
            )),
            (_, Some(k)) => Ok(ExtractionRule::TopK(k)),
            (t, None) => {
                let t = t.unwrap_or(DEFAULT_THRESHOLD);
                if t.is_finite() {
                    Ok(ExtractionRule::Threshold(t))
                } else {
                    Err(Error::InvalidParameter(format!("threshold {t}")))
                }
            }
        }
    }
}

fn base_name() -> String {
    "base".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    #[serde(default = "base_name")]
    pub name: String,
    pub manifest: PathBuf,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub pool: PathBuf,
    pub features: PathBuf,
    pub prompts: PathBuf,
    /// Text embeddings keyed by prompt index; required unless the scorer is `stub`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

/// Space in which the initial core is spread out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreSpace {
    #[default]
    Features,
    Embeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub name: String,
    pub seed: u64,
    pub tau: f64,
    pub n_perturb: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub core_capacity: Option<usize>,
    /// Size of the initial core; defaults to the capacity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_core: Option<usize>,
    pub core_space: CoreSpace,
    /// Train on the core as well as the new corner data.
    pub replay: bool,
    /// The seed field is ignored; each iteration derives its own.
    pub partition: PartitionPolicy,
    pub augment: AugmentPolicy,
    /// The seed field is ignored; each iteration derives its own.
    pub train: TrainConfig,
    pub perturbation: FeaturePerturbation,
    /// Std of the noise added to the features of augmented variants.
    pub feature_jitter: f64,
    pub extraction: ExtractionConfig,
    pub scorer: ScorerConfig,
    /// Evaluate every this many iterations (the last one always).
    pub eval_every: usize,
    /// Persist augmented images.
    pub write_images: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseSpec>,
    pub tasks: Vec<TaskSpec>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            name: "run".into(),
            seed: 0,
            tau: DEFAULT_TAU,
            n_perturb: DEFAULT_N_PERTURB,
            core_capacity: Some(DEFAULT_CORE_CAPACITY),
            initial_core: None,
            core_space: CoreSpace::Features,
            replay: true,
            partition: PartitionPolicy::default(),
            augment: AugmentPolicy::default(),
            train: TrainConfig::default(),
            perturbation: FeaturePerturbation::default(),
            feature_jitter: 0.3,
            extraction: ExtractionConfig::default(),
            scorer: ScorerConfig::default(),
            eval_every: 1,
            write_images: true,
            base: None,
            tasks: Vec::new(),
        }
    }
}

fn resolve(dir: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = dir.join(&*p);
    }
}

fn must_exist(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(p.to_path_buf()))
    }
}

impl LoopConfig {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(origin, e))
    }

    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::manifest::read_to_string(path)?;
        let mut cfg = Self::from_json_str(&text, path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        if let Some(b) = &mut self.base {
            resolve(dir, &mut b.manifest);
            resolve(dir, &mut b.features);
            if let Some(r) = &mut b.image_root {
                resolve(dir, r);
            }
        }
        for t in &mut self.tasks {
            resolve(dir, &mut t.pool);
            resolve(dir, &mut t.features);
            resolve(dir, &mut t.prompts);
            if let Some(p) = &mut t.prompt_embeddings {
                resolve(dir, p);
            }
            if let Some(r) = &mut t.image_root {
                resolve(dir, r);
            }
        }
        if let Some(e) = &mut self.scorer.embeddings {
            resolve(dir, e);
        }
    }

    pub fn base(&self) -> Result<&BaseSpec> {
        self.base
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("config has no base task".into()))
    }

    /// Checks parameters and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("unusable run name {:?}", self.name));
        }
        if self.tasks.is_empty() {
            return Err(Error::Empty("task list"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1)", self.tau));
        }
        if self.n_perturb == 0 {
            return bad("n_perturb must be at least 1".into());
        }
        if self.core_capacity == Some(0) {
            return bad("core capacity must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.feature_jitter.is_finite() && self.feature_jitter >= 0.0) {
            return bad("feature_jitter must be finite and non-negative".into());
        }
        if !(self.perturbation.noise_std.is_finite() && self.perturbation.noise_std >= 0.0) {
            return bad("perturbation noise must be finite and non-negative".into());
        }
        self.partition.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.extraction.rule()?;
        let base = self.base()?;
        let mut names = BTreeSet::from([base.name.clone()]);
        for t in &self.tasks {
            if !names.insert(t.name.clone()) {
                return bad(format!("task name {:?} used twice", t.name));
            }
        }
        must_exist(&base.manifest)?;
        must_exist(&base.features)?;
        for t in &self.tasks {
            must_exist(&t.pool)?;
            must_exist(&t.features)?;
            must_exist(&t.prompts)?;
            match (&t.prompt_embeddings, self.scorer.source) {
                (Some(p), _) => must_exist(p)?,
                (None, ScorerSource::Stub) => {}
                (None, _) => {
                    return bad(format!(
                        "task {:?} needs prompt_embeddings with a {:?} scorer",
                        t.name, self.scorer.source
                    ))
                }
            }
        }
        match self.scorer.source {
            ScorerSource::Stub => {
                if self.scorer.stub_dim < 2 {
                    return bad("stub_dim must be at least 2".into());
                }
            }
            ScorerSource::File => match &self.scorer.embeddings {
                Some(p) => must_exist(p)?,
                None => return bad("file scorer needs an embeddings path".into()),
            },
            ScorerSource::Remote => {
                if self.scorer.url.is_none() {
                    return bad("remote scorer needs a url".into());
                }
            }
        }
        Ok(())
    }

    fn seed_for(&self, t: usize, stream: u64) -> u64 {
        rng::key(self.seed, &[t as u64, stream])
    }
}

fn image_root_of(explicit: &Option<PathBuf>, manifest: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf())
}

/// Image embeddings of every sample of `manifest` from the configured source.
pub fn image_embeddings(config: &LoopConfig, manifest: &DatasetManifest, image_root: &Path) -> Result<EmbeddingTable<f64>> {
    match config.scorer.source {
        ScorerSource::Stub => StubScorer::new(config.scorer.stub_dim, config.seed).embed_manifest(manifest, image_root),
        ScorerSource::File => {
            let path = config
                .scorer
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("file scorer needs an embeddings path".into()))?;
            read_embeddings(path, EmbeddingKind::Image)
        }
        ScorerSource::Remote => {
            let url = config
                .scorer
                .url
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("remote scorer needs a url".into()))?;
            RemoteScorer::new(url.clone())
                .with_batch_size(config.scorer.batch_size)
                .fetch_embeddings(&requests_for(manifest, image_root))
        }
    }
}

pub fn prompt_set(config: &LoopConfig, task: &TaskSpec) -> Result<PromptSet<f64>> {
    let file = PromptFile::load(&task.prompts)?;
    match &task.prompt_embeddings {
        Some(p) => PromptSet::new(file.scenario, file.prompts, read_embeddings(p, EmbeddingKind::Text)?),
        None => StubScorer::new(config.scorer.stub_dim, config.seed).prompt_set(&file.scenario, &file.prompts),
    }
}

/// Extraction, mean partitioning and train-split augmentation of one pool.
#[derive(Debug, Clone)]
pub struct CornerData {
    pub set: CornerCaseSet,
    pub assignment: SplitAssignment,
    /// Extracted samples with confidences and splits, plus augmented variants.
    pub manifest: DatasetManifest,
    pub augmentation: Option<AugmentOutput>,
}

impl CornerData {
    pub fn ids_in(&self, split: Split) -> BTreeSet<u64> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }
}

pub struct CurationParams<'a> {
    pub rule: ExtractionRule,
    pub aggregation: Aggregation,
    pub partition: PartitionPolicy,
    pub plan: AugmentationPlan,
    pub image_root: &'a Path,
    /// Where augmented images go; `None` skips pixel work.
    pub out_dir: Option<&'a Path>,
    pub source_name: String,
}

/// Extract, then partition, then augment, in that order. An empty
/// extraction returns an empty set and no partition.
pub fn optimize_corner_data(
    pool: &DatasetManifest,
    embeddings: &EmbeddingTable<f64>,
    prompts: &PromptSet<f64>,
    params: &CurationParams<'_>,
) -> Result<CornerData> {
    let set = extract_corner_cases(pool, embeddings, prompts, params.rule, params.aggregation, params.source_name.clone())?;
    let mut manifest = corner_manifest(pool, &set);
    if set.is_empty() {
        return Ok(CornerData {
            set,
            assignment: SplitAssignment::new(),
            manifest,
            augmentation: None,
        });
    }
    let assignment = mean_partition(&set, &params.partition)?;
    manifest.apply_splits(&assignment);
    let aug = augment_dataset(&manifest, &params.plan, params.image_root, params.out_dir)?;
    let manifest = aug.manifest.clone();
    Ok(CornerData {
        set,
        assignment,
        manifest,
        augmentation: Some(aug),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub accuracy: f64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub status: String,
    pub corner_count: usize,
    /// Train, val and test sizes of the curated data.
    pub split_sizes: [usize; 3],
    pub augmented: usize,
    pub train_size: usize,
    pub selected: usize,
    pub core_size: usize,
    pub evaluations: BTreeMap<String, TaskEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopState {
    pub schema_version: u32,
    pub t: usize,
    pub config: LoopConfig,
    /// Where each setting came from: `flag`, `config` or `default`.
    pub settings_source: BTreeMap<String, String>,
    /// Base64 of the `TLP1` parameter snapshot.
    pub params: String,
    pub core: CoreDataset,
    pub history: Vec<IterationRecord>,
}

impl LoopState {
    pub fn model(&self) -> Result<SoftmaxClassifier<f64>> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.params)
            .map_err(|e| Error::parse("state.json", format!("params: {e}")))?;
        SoftmaxClassifier::restore(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, canonical_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::manifest::read_to_string(path)?;
        let s: LoopState = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if s.schema_version != STATE_VERSION {
            return Err(Error::SchemaVersion {
                expected: STATE_VERSION,
                found: s.schema_version,
            });
        }
        s.core.validate()?;
        Ok(s)
    }

    /// Accuracy per task after each evaluated iteration.
    pub fn accuracy_history(&self) -> Vec<BTreeMap<String, f64>> {
        self.history
            .iter()
            .filter(|r| !r.evaluations.is_empty())
            .map(|r| r.evaluations.iter().map(|(k, v)| (k.clone(), v.accuracy)).collect())
            .collect()
    }

    pub fn ap_history(&self) -> Vec<BTreeMap<String, f64>> {
        self.history
            .iter()
            .filter(|r| !r.evaluations.is_empty())
            .map(|r| r.evaluations.iter().map(|(k, v)| (k.clone(), v.metrics.ap)).collect())
            .collect()
    }

    pub fn final_evaluations(&self) -> Option<&BTreeMap<String, TaskEval>> {
        self.history.iter().rev().map(|r| &r.evaluations).find(|e| !e.is_empty())
    }
}

fn encode_params(model: &SoftmaxClassifier<f64>) -> String {
    base64::engine::general_purpose::STANDARD.encode(model.snapshot())
}

/// Test data of one task, ready for evaluation.
#[derive(Debug, Clone)]
struct EvalSet {
    task: String,
    samples: Vec<FeatureSample<f64>>,
    gts: Vec<GroundTruth>,
    dims: BTreeMap<u64, (u32, u32)>,
    categories: Vec<u64>,
}

impl EvalSet {
    fn new(task: &str, manifest: &DatasetManifest, ids: &BTreeSet<u64>, features: &BTreeMap<u64, FeatureSample<f64>>) -> Result<Self> {
        let samples = ids
            .iter()
            .map(|id| features.get(id).cloned().ok_or_else(|| missing_features(*id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet {
            task: task.to_string(),
            samples,
            gts: manifest
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.sample_id))
                .map(GroundTruth::from)
                .collect(),
            dims: manifest
                .samples
                .iter()
                .filter(|s| ids.contains(&s.id))
                .map(|s| (s.id, (s.width, s.height)))
                .collect(),
            categories: manifest.categories.iter().map(|c| c.id).collect(),
        })
    }

    fn ids(&self) -> BTreeSet<u64> {
        self.samples.iter().map(|s| s.sample_id).collect()
    }

    /// Accuracy, and detection metrics for whole-image detections labelled by
    /// the argmax class and scored by its probability.
    fn evaluate(&self, model: &SoftmaxClassifier<f64>) -> Result<TaskEval> {
        let accuracy = model.evaluate(&self.samples)?;
        let mut dets = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let p = model.predict(&s.features)?;
            let c = crate::learner::argmax(&p);
            let (w, h) = self.dims[&s.sample_id];
            dets.push(Detection {
                sample_id: s.sample_id,
                category_id: c as u64,
                bbox: [0.0, 0.0, f64::from(w), f64::from(h)],
                score: p[c].clamp(0.0, 1.0),
            });
        }
        Ok(TaskEval {
            accuracy,
            metrics: compute_metrics(&dets, &self.gts, &self.categories)?,
        })
    }
}

fn missing_features(id: u64) -> Error {
    Error::InvalidRecord {
        id,
        message: "no features for sample".into(),
    }
}

fn load_features(path: &Path) -> Result<(FeatureDataset, BTreeMap<u64, FeatureSample<f64>>)> {
    let d = FeatureDataset::load(path)?;
    let map = d.samples.iter().map(|s| (s.sample_id, s.clone())).collect();
    Ok((d, map))
}

/// In-memory view of everything seen so far.
struct Workspace {
    dim: usize,
    classes: usize,
    /// Features of every original (non-augmented) sample seen.
    features: BTreeMap<u64, FeatureSample<f64>>,
    /// Base first, then tasks in order of arrival.
    eval_sets: Vec<EvalSet>,
    next_id: u64,
}

impl Workspace {
    fn add_features(&mut self, d: &FeatureDataset, map: BTreeMap<u64, FeatureSample<f64>>) -> Result<()> {
        if d.dim != self.dim || d.classes != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: d.dim,
            });
        }
        for (id, s) in map {
            self.next_id = self.next_id.max(id.checked_add(1).ok_or(Error::IdOverflow)?);
            self.features.insert(id, s);
        }
        Ok(())
    }

    fn test_ids(&self) -> BTreeSet<u64> {
        self.eval_sets.iter().flat_map(|e| e.ids()).collect()
    }

    fn evaluate(&self, model: &SoftmaxClassifier<f64>) -> Result<BTreeMap<String, TaskEval>> {
        self.eval_sets
            .iter()
            .map(|e| Ok((e.task.clone(), e.evaluate(model)?)))
            .collect()
    }
}

fn check_labels(manifest: &DatasetManifest, features: &BTreeMap<u64, FeatureSample<f64>>) -> Result<()> {
    for s in &manifest.samples {
        let f = features.get(&s.id).ok_or_else(|| missing_features(s.id))?;
        if let Some(a) = manifest.annotations_of(s.id).next() {
            if a.category_id != f.label {
                return Err(Error::InvalidRecord {
                    id: s.id,
                    message: format!("feature label {} disagrees with annotation {}", f.label, a.category_id),
                });
            }
        }
    }
    Ok(())
}

/// Paths of one run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path, name: &str) -> Self {
        RunLayout {
            dir: out.join("runs").join(name),
        }
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("state.json")
    }
    pub fn iter_dir(&self, t: usize) -> PathBuf {
        self.dir.join(format!("iter_{t}"))
    }
    fn lock(&self) -> PathBuf {
        self.dir.join(".lock")
    }
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(layout: &RunLayout) -> Result<Self> {
        fs::create_dir_all(&layout.dir).map_err(|e| Error::io(&layout.dir, e))?;
        let path = layout.lock();
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Files of one iteration, written into a temp dir and renamed into place.
struct IterWriter {
    tmp: PathBuf,
    dst: PathBuf,
}

impl IterWriter {
    fn new(layout: &RunLayout, t: usize) -> Result<Self> {
        let dst = layout.iter_dir(t);
        let tmp = layout.dir.join(format!(".iter_{t}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(IterWriter { tmp, dst })
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_atomic(&self.tmp.join(name), canonical_string(value)?.as_bytes())
    }

    fn commit(self) -> Result<()> {
        if self.dst.exists() {
            fs::remove_dir_all(&self.dst).map_err(|e| Error::io(&self.dst, e))?;
        }
        fs::rename(&self.tmp, &self.dst).map_err(|e| Error::io(&self.dst, e))?;
        std::mem::forget(self);
        Ok(())
    }
}

impl Drop for IterWriter {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

#[derive(Debug, Serialize)]
struct Audit<'a> {
    train_ids: Vec<u64>,
    epoch_ids: &'a [Vec<u64>],
    epoch_losses: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this iteration (the state stays resumable).
    pub stop_after: Option<usize>,
    pub settings_source: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: LoopState,
    pub layout: RunLayout,
    pub forgetting: ForgettingReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamReport {
    pub accuracy: ForgettingReport,
    pub ap: ForgettingReport,
}

fn perturb_labeler<'a>(
    model: &'a SoftmaxClassifier<f64>,
    features: &'a BTreeMap<u64, FeatureSample<f64>>,
    perturbation: &'a FeaturePerturbation,
) -> impl Fn(u64, usize, usize, u64) -> Result<u64> + Sync + 'a {
    move |id, i, n, seed| {
        let f = features.get(&id).ok_or_else(|| missing_features(id))?;
        let x = perturbation.apply(&f.features, seed, id, i, n)?;
        model.predict_label(&x)
    }
}

fn base_assignment(config: &LoopConfig, manifest: &DatasetManifest) -> Result<SplitAssignment> {
    let set = CornerCaseSet {
        scenario_name: config.base()?.name.clone(),
        members: manifest
            .samples
            .iter()
            .map(|s| Member {
                sample_id: s.id,
                confidence: 1.0,
            })
            .collect(),
        source_manifest: config.base()?.manifest.display().to_string(),
    };
    let policy = PartitionPolicy {
        seed: config.seed_for(0, stream::PARTITION),
        ..config.partition
    };
    mean_partition(&set, &policy)
}

fn ids_with(assignment: &SplitAssignment, splits: &[Split]) -> BTreeSet<u64> {
    assignment
        .iter()
        .filter(|(_, s)| splits.contains(s))
        .map(|(id, _)| *id)
        .collect()
}

fn load_base(config: &LoopConfig) -> Result<(DatasetManifest, FeatureDataset, BTreeMap<u64, FeatureSample<f64>>)> {
    let base = config.base()?;
    let manifest = load_manifest(&base.manifest)?;
    let (d, map) = load_features(&base.features)?;
    check_labels(&manifest, &map)?;
    Ok((manifest, d, map))
}

fn train_config(config: &LoopConfig, t: usize) -> TrainConfig {
    TrainConfig {
        seed: config.seed_for(t, stream::TRAIN_SHUFFLE),
        ..config.train
    }
}

/// Trains the initial model on the base train split, picks the initial core
/// and evaluates the base test split. Writes `iter_0`.
fn initialize(config: &LoopConfig, layout: &RunLayout, opts: &RunOptions) -> Result<LoopState> {
    let (manifest, d, features) = load_base(config)?;
    let assignment = base_assignment(config, &manifest)?;
    let train_ids = ids_with(&assignment, &[Split::Train]);
    let pool_ids = ids_with(&assignment, &[Split::Train, Split::Val]);
    let train: Vec<FeatureSample<f64>> = train_ids.iter().map(|id| features[id].clone()).collect();
    let (model, report) = SoftmaxClassifier::zeros(d.dim, d.classes)?.train(&train, &train_config(config, 0))?;

    let k = config
        .initial_core
        .or(config.core_capacity)
        .unwrap_or(pool_ids.len())
        .min(pool_ids.len());
    let picks = match config.core_space {
        CoreSpace::Features => {
            let points: Vec<(u64, &[f64])> = pool_ids.iter().map(|id| (*id, features[id].features.as_slice())).collect();
            farthest_point_selection(&points, k)?
        }
        CoreSpace::Embeddings => {
            let base = config.base()?;
            let root = image_root_of(&base.image_root, &base.manifest);
            let emb = image_embeddings(config, &manifest, &root)?;
            let points: Vec<(u64, &[f64])> = pool_ids
                .iter()
                .map(|id| Ok((*id, emb.get(*id).ok_or(Error::MissingEmbedding(*id))?)))
                .collect::<Result<_>>()?;
            farthest_point_selection(&points, k)?
        }
    };
    let labeler = perturb_labeler(&model, &features, &config.perturbation);
    let scores = score_candidates(&picks, &labeler, config.n_perturb, config.seed_for(0, stream::PERTURB))?;
    let mut core = CoreDataset {
        capacity: config.core_capacity,
        members: scores
            .iter()
            .map(|s| CoreMember {
                sample_id: s.sample_id,
                sigma: s.sigma,
                added_at: 0,
            })
            .collect(),
    };
    core.canonicalize();
    core.validate()?;

    let test_ids = ids_with(&assignment, &[Split::Test]);
    let base_name = config.base()?.name.clone();
    let eval = EvalSet::new(&base_name, &manifest, &test_ids, &features)?;
    let evaluations = BTreeMap::from([(base_name.clone(), eval.evaluate(&model)?)]);
    let sizes = [Split::Train, Split::Val, Split::Test].map(|s| ids_with(&assignment, &[s]).len());
    let record = IterationRecord {
        iteration: 0,
        task: Some(base_name.clone()),
        status: STATUS_INITIALIZED.into(),
        corner_count: manifest.samples.len(),
        split_sizes: sizes,
        augmented: 0,
        train_size: train.len(),
        selected: 0,
        core_size: core.len(),
        evaluations,
    };
    let w = IterWriter::new(layout, 0)?;
    let policy = PartitionPolicy {
        seed: config.seed_for(0, stream::PARTITION),
        ..config.partition
    };
    AssignmentFile::new(&base_name, &policy, &assignment).save(&w.tmp.join("splits.json"))?;
    w.json("core.json", &core)?;
    model.save(&w.tmp.join("params.bin"))?;
    w.json("metrics.json", &record)?;
    w.json(
        "audit.json",
        &Audit {
            train_ids: train_ids.iter().copied().collect(),
            epoch_ids: &report.epoch_ids,
            epoch_losses: &report.epoch_losses,
        },
    )?;
    w.commit()?;
    drop(d);
    Ok(LoopState {
        schema_version: STATE_VERSION,
        t: 0,
        config: config.clone(),
        settings_source: opts.settings_source.clone(),
        params: encode_params(&model),
        core,
        history: vec![record],
    })
}

/// Rebuilds the workspace of a state from the config and persisted iterations.
fn rebuild_workspace(config: &LoopConfig, state: &LoopState, layout: &RunLayout) -> Result<Workspace> {
    let (manifest, d, features) = load_base(config)?;
    let assignment = AssignmentFile::load(&layout.iter_dir(0).join("splits.json"))?.assignment()?;
    let mut ws = Workspace {
        dim: d.dim,
        classes: d.classes,
        features: BTreeMap::new(),
        eval_sets: Vec::new(),
        next_id: 0,
    };
    ws.add_features(&d, features)?;
    let base_name = config.base()?.name.clone();
    ws.eval_sets
        .push(EvalSet::new(&base_name, &manifest, &ids_with(&assignment, &[Split::Test]), &ws.features)?);
    for rec in state.history.iter().skip(1) {
        let task = &config.tasks[rec.iteration - 1];
        let pool = load_manifest(&task.pool)?;
        let (td, tmap) = load_features(&task.features)?;
        ws.next_id = ws.next_id.max(pool.max_sample_id().map_or(0, |m| m + 1));
        if rec.status != STATUS_COMPLETED {
            continue;
        }
        let splits = AssignmentFile::load(&layout.iter_dir(rec.iteration).join("splits.json"))?.assignment()?;
        let originals: BTreeMap<u64, FeatureSample<f64>> = tmap
            .into_iter()
            .filter(|(id, _)| splits.contains_key(id))
            .collect();
        ws.add_features(&td, originals)?;
        ws.eval_sets
            .push(EvalSet::new(&task.name, &pool, &ids_with(&splits, &[Split::Test]), &ws.features)?);
    }
    Ok(ws)
}

fn variant_features(
    aug: &AugmentOutput,
    features: &BTreeMap<u64, FeatureSample<f64>>,
    jitter: f64,
    seed: u64,
) -> Result<Vec<FeatureSample<f64>>> {
    use rand_distr::{Distribution, StandardNormal};
    aug.provenance
        .iter()
        .map(|(&id, p)| {
            let src = features.get(&p.source).ok_or_else(|| missing_features(p.source))?;
            let mut r = rng::rng_for(seed, &[stream::AUGMENT, id]);
            Ok(FeatureSample {
                sample_id: id,
                features: src
                    .features
                    .iter()
                    .map(|&x| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        x + jitter * z
                    })
                    .collect(),
                label: src.label,
            })
        })
        .collect()
}

fn should_evaluate(config: &LoopConfig, t: usize) -> bool {
    t % config.eval_every == 0 || t == config.tasks.len()
}

/// One iteration of the loop. Files go to `iter_<t>`; the returned state has
/// `t + 1`. On error nothing of the iteration is left behind.
fn run_iteration(config: &LoopConfig, state: &LoopState, ws: &mut Workspace, layout: &RunLayout) -> Result<LoopState> {
    let t = state.t + 1;
    let task = config
        .tasks
        .get(t - 1)
        .ok_or_else(|| Error::Invariant(format!("no task for iteration {t}")))?;
    log::info!("iteration {t}: {}", task.name);
    let model = state.model()?;
    let pool = load_manifest(&task.pool)?;
    let (td, tmap) = load_features(&task.features)?;
    check_labels(&pool, &tmap)?;
    let image_root = image_root_of(&task.image_root, &task.pool);
    let embeddings = image_embeddings(config, &pool, &image_root)?;
    let prompts = prompt_set(config, task)?;
    let w = IterWriter::new(layout, t)?;
    let id_base = ws.next_id.max(pool.max_sample_id().map_or(0, |m| m + 1));
    let params = CurationParams {
        rule: config.extraction.rule()?,
        aggregation: config.extraction.aggregation,
        partition: PartitionPolicy {
            seed: config.seed_for(t, stream::PARTITION),
            ..config.partition
        },
        plan: AugmentationPlan {
            policy: config.augment,
            seed: config.seed_for(t, stream::AUGMENT),
            id_base: Some(id_base),
        },
        image_root: &image_root,
        out_dir: config.write_images.then_some(w.tmp.as_path()),
        source_name: task.pool.display().to_string(),
    };
    let corner = optimize_corner_data(&pool, &embeddings, &prompts, &params)?;
    ws.next_id = id_base;

    let mut next = state.clone();
    next.t = t;
    let mut record = IterationRecord {
        iteration: t,
        task: Some(task.name.clone()),
        status: STATUS_COMPLETED.into(),
        corner_count: corner.set.len(),
        split_sizes: [Split::Train, Split::Val, Split::Test].map(|s| corner.ids_in(s).len()),
        augmented: corner.augmentation.as_ref().map_or(0, |a| a.provenance.len()),
        train_size: 0,
        selected: 0,
        core_size: state.core.len(),
        evaluations: BTreeMap::new(),
    };

    if corner.set.is_empty() {
        log::warn!("iteration {t}: no corner cases matched in {}", task.name);
        record.status = STATUS_NO_MATCH.into();
        if should_evaluate(config, t) {
            record.evaluations = ws.evaluate(&model)?;
        }
        w.json("metrics.json", &record)?;
        w.json("core.json", &state.core)?;
        model.save(&w.tmp.join("params.bin"))?;
        w.commit()?;
        next.history.push(record);
        return Ok(next);
    }

    let originals: BTreeMap<u64, FeatureSample<f64>> = tmap
        .into_iter()
        .filter(|(id, _)| corner.assignment.contains_key(id))
        .collect();
    let train_ids = corner.ids_in(Split::Train);
    let candidates: Vec<u64> = corner.ids_in(Split::Train).union(&corner.ids_in(Split::Val)).copied().collect();
    let test_ids = corner.ids_in(Split::Test);

    let mut train: BTreeMap<u64, FeatureSample<f64>> = BTreeMap::new();
    if config.replay {
        for m in &state.core.members {
            let f = ws.features.get(&m.sample_id).ok_or_else(|| missing_features(m.sample_id))?;
            train.insert(m.sample_id, f.clone());
        }
    }
    for id in &train_ids {
        train.insert(*id, originals[id].clone());
    }
    if let Some(aug) = &corner.augmentation {
        for v in variant_features(aug, &originals, config.feature_jitter, config.seed_for(t, stream::FEATURE_JITTER))? {
            train.insert(v.sample_id, v);
        }
    }
    let mut all_tests = ws.test_ids();
    all_tests.extend(&test_ids);
    if let Some(id) = train.keys().find(|id| all_tests.contains(id)) {
        return Err(Error::Invariant(format!("test sample {id} in the training set")));
    }
    if let Some(id) = candidates.iter().find(|id| all_tests.contains(id)) {
        return Err(Error::Invariant(format!("test sample {id} among selection candidates")));
    }
    let train: Vec<FeatureSample<f64>> = train.into_values().collect();
    let (model, report) = model.train(&train, &train_config(config, t))?;
    record.train_size = train.len();

    ws.add_features(&td, originals)?;
    ws.eval_sets.push(EvalSet::new(&task.name, &pool, &test_ids, &ws.features)?);
    if should_evaluate(config, t) {
        record.evaluations = ws.evaluate(&model)?;
    }

    let labeler = perturb_labeler(&model, &ws.features, &config.perturbation);
    let selected: Vec<UncertaintyScore> = select_uncertain(
        &candidates,
        &labeler,
        config.tau,
        config.n_perturb,
        config.seed_for(t, stream::PERTURB),
    )?;
    let core = update_core(&state.core, &selected, t as u64);
    core.validate()?;
    record.selected = selected.len();
    record.core_size = core.len();

    save_manifest(&corner.manifest, &w.tmp.join("corner_manifest.json"))?;
    AssignmentFile::new(&corner.set.scenario_name, &params.partition, &corner.assignment)
        .save(&w.tmp.join("splits.json"))?;
    w.json("core.json", &core)?;
    w.json("selection.json", &selected)?;
    model.save(&w.tmp.join("params.bin"))?;
    w.json("metrics.json", &record)?;
    w.json(
        "audit.json",
        &Audit {
            train_ids: train.iter().map(|s| s.sample_id).collect(),
            epoch_ids: &report.epoch_ids,
            epoch_losses: &report.epoch_losses,
        },
    )?;
    w.commit()?;

    next.params = encode_params(&model);
    next.core = core;
    next.history.push(record);
    Ok(next)
}

/// Runs (or resumes) the whole stream. A persisted state must have been
/// produced by the same config.
pub fn run_stream(config: &LoopConfig, out: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let layout = RunLayout::new(out, &config.name);
    let _lock = RunLock::acquire(&layout)?;
    let mut state = if layout.state().exists() {
        let s = LoopState::load(&layout.state())?;
        if s.config != *config {
            return Err(Error::InvalidParameter(format!(
                "{} was produced by a different config",
                layout.state().display()
            )));
        }
        log::info!("resuming {} at iteration {}", config.name, s.t);
        s
    } else {
        let s = initialize(config, &layout, opts)?;
        s.save(&layout.state())?;
        s
    };
    let mut ws = rebuild_workspace(config, &state, &layout)?;
    while state.t < config.tasks.len() {
        if opts.stop_after.is_some_and(|k| state.t >= k) {
            break;
        }
        state = run_iteration(config, &state, &mut ws, &layout)?;
        state.save(&layout.state())?;
    }
    let report = StreamReport {
        accuracy: forgetting_report(&state.accuracy_history())?,
        ap: forgetting_report(&state.ap_history())?,
    };
    // Missing matrix entries serialize as null, which the canonical writer refuses.
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    write_atomic(&layout.dir.join("report.json"), text.as_bytes())?;
    let mut table = state.to_table()?;
    table.push('\n');
    table.push_str(&report.accuracy.to_table());
    write_atomic(&layout.dir.join("report.txt"), table.as_bytes())?;
    Ok(RunOutcome {
        state,
        layout,
        forgetting: report.accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub core_capacity: Option<usize>,
    pub replay: bool,
    pub run: String,
    /// Final evaluation per task.
    pub evaluations: BTreeMap<String, TaskEval>,
}

impl SweepRow {
    pub fn accuracy_of(&self, task: &str) -> Option<f64> {
        self.evaluations.get(task).map(|e| e.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub base: String,
    pub tasks: Vec<String>,
    pub tau_rows: Vec<SweepRow>,
    pub capacity_rows: Vec<SweepRow>,
    pub naive: SweepRow,
}

fn fmt_num(v: f64) -> String {
    v.to_string().replace('.', "p")
}

fn sweep_row(config: &LoopConfig, label: String, out: &Path) -> Result<SweepRow> {
    let outcome = run_stream(config, out, &RunOptions::default())?;
    let evaluations = outcome
        .state
        .final_evaluations()
        .ok_or(Error::Empty("evaluations"))?
        .clone();
    Ok(SweepRow {
        label,
        tau: config.tau,
        core_capacity: config.core_capacity,
        replay: config.replay,
        run: config.name.clone(),
        evaluations,
    })
}

/// Runs the stream once per tau (at the configured capacity), once per
/// capacity (at the configured tau), and once without replay.
pub fn run_sweep(config: &LoopConfig, out: &Path, taus: &[f64], capacities: &[usize]) -> Result<SweepReport> {
    config.validate()?;
    let mut cache: BTreeMap<String, SweepRow> = BTreeMap::new();
    let mut run = |tau: f64, cap: Option<usize>, replay: bool, label: String| -> Result<SweepRow> {
        let name = format!(
            "{}_tau{}_cap{}{}",
            config.name,
            fmt_num(tau),
            cap.map_or("none".to_string(), |c| c.to_string()),
            if replay { "" } else { "_naive" }
        );
        if let Some(r) = cache.get(&name) {
            return Ok(SweepRow { label, ..r.clone() });
        }
        let cfg = LoopConfig {
            name: name.clone(),
            tau,
            core_capacity: cap,
            replay,
            ..config.clone()
        };
        let row = sweep_row(&cfg, label, out)?;
        cache.insert(name, row.clone());
        Ok(row)
    };
    let tau_rows = taus
        .iter()
        .map(|&tau| run(tau, config.core_capacity, true, format!("tau={tau}")))
        .collect::<Result<Vec<_>>>()?;
    let capacity_rows = capacities
        .iter()
        .map(|&c| run(config.tau, Some(c), true, format!("core={c}")))
        .collect::<Result<Vec<_>>>()?;
    let naive = run(config.tau, config.core_capacity, false, "no replay".into())?;
    Ok(SweepReport {
        base: config.base()?.name.clone(),
        tasks: config.tasks.iter().map(|t| t.name.clone()).collect(),
        tau_rows,
        capacity_rows,
        naive,
    })
}

/// Text table in percent: base AP and AR, the six detection columns per
/// corner task, then classification accuracy of every task.
pub fn format_report_table(title: &str, base: &str, tasks: &[String], rows: &[(String, &BTreeMap<String, TaskEval>)]) -> String {
    use std::fmt::Write as _;
    let col = 6;
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(title.len());
    let group = |n: usize| n * (col + 1) - 1;
    let mut all: Vec<&str> = vec![base];
    all.extend(tasks.iter().map(String::as_str));
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$} | {:<w$}", "", base, w = group(2));
    for t in tasks {
        let _ = write!(out, " | {:<w$}", t, w = group(6));
    }
    let _ = writeln!(out, " | Acc");
    let _ = write!(out, "{title:<label_w$} |");
    for h in ["AP", "AR"] {
        let _ = write!(out, " {h:>col$}");
    }
    for _ in tasks {
        out.push_str(" |");
        for h in crate::eval::TABLE_HEADER {
            let _ = write!(out, " {h:>col$}");
        }
    }
    out.push_str(" |");
    for t in &all {
        let short: String = t.chars().take(col).collect();
        let _ = write!(out, " {short:>col$}");
    }
    out.push('\n');
    let cells = |out: &mut String, vals: Option<Vec<f64>>, n: usize| match vals {
        Some(v) => {
            for x in v {
                let _ = write!(out, " {:>col$.1}", x * 100.0);
            }
        }
        None => {
            for _ in 0..n {
                let _ = write!(out, " {:>col$}", "-");
            }
        }
    };
    for (label, evals) in rows {
        let _ = write!(out, "{label:<label_w$} |");
        cells(&mut out, evals.get(base).map(|e| vec![e.metrics.ap, e.metrics.ar100]), 2);
        for t in tasks {
            out.push_str(" |");
            cells(&mut out, evals.get(t).map(|e| e.metrics.columns().to_vec()), 6);
        }
        out.push_str(" |");
        for t in &all {
            cells(&mut out, evals.get(*t).map(|e| vec![e.accuracy]), 1);
        }
        out.push('\n');
    }
    out
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        fn rows(rs: &[SweepRow]) -> Vec<(String, &BTreeMap<String, TaskEval>)> {
            rs.iter().map(|r| (r.label.clone(), &r.evaluations)).collect()
        }
        let mut s = format_report_table("tau", &self.base, &self.tasks, &rows(&self.tau_rows));
        s.push('\n');
        s.push_str(&format_report_table("core", &self.base, &self.tasks, &rows(&self.capacity_rows)));
        s.push('\n');
        s.push_str(&format_report_table("replay", &self.base, &self.tasks, &rows(std::slice::from_ref(&self.naive))));
        s
    }
}

impl LoopState {
    /// One row per evaluated iteration.
    pub fn to_table(&self) -> Result<String> {
        let base = self.config.base()?.name.clone();
        let tasks: Vec<String> = self.config.tasks.iter().map(|t| t.name.clone()).collect();
        let rows: Vec<(String, &BTreeMap<String, TaskEval>)> = self
            .history
            .iter()
            .filter(|r| !r.evaluations.is_empty())
            .map(|r| (format!("t={}", r.iteration), &r.evaluations))
            .collect();
        Ok(format_report_table("iter", &base, &tasks, &rows))
    }
}

/// Accuracy and detection metrics of `model` on the samples `ids` of
/// `manifest`.
pub fn evaluate_split(
    model: &SoftmaxClassifier<f64>,
    manifest: &DatasetManifest,
    features: &BTreeMap<u64, FeatureSample<f64>>,
    ids: &BTreeSet<u64>,
) -> Result<TaskEval> {
    EvalSet::new("", manifest, ids, features)?.evaluate(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = LoopConfig::from_json_str("{}", Path::new("x")).unwrap();
        assert_eq!(c.tau, 0.4);
        assert_eq!(c.n_perturb, 5);
        assert_eq!(c.core_capacity, Some(10_000));
        assert!(matches!(c.validate(), Err(Error::Empty(_))));
        assert!(LoopConfig::from_json_str(r#"{"bogus": 1}"#, Path::new("x")).is_err());
    }

    #[test]
    fn extraction_rule_choice() {
        let mut e = ExtractionConfig::default();
        assert_eq!(e.rule().unwrap(), ExtractionRule::Threshold(DEFAULT_THRESHOLD));
        e.top_k = Some(3);
        assert_eq!(e.rule().unwrap(), ExtractionRule::TopK(3));
        e.threshold = Some(0.5);
        assert!(e.rule().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut c = LoopConfig {
            base: Some(BaseSpec {
                name: "base".into(),
                manifest: "b.json".into(),
                features: "/abs/f.json".into(),
                image_root: None,
            }),
            ..Default::default()
        };
        c.resolve_paths(Path::new("/data"));
        let b = c.base.unwrap();
        assert_eq!(b.manifest, PathBuf::from("/data/b.json"));
        assert_eq!(b.features, PathBuf::from("/abs/f.json"));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path(), "r");
        let a = RunLock::acquire(&layout).unwrap();
        assert!(matches!(RunLock::acquire(&layout), Err(Error::Locked(_))));
        drop(a);
        RunLock::acquire(&layout).unwrap();
    }
}
