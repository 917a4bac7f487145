//! Samples, annotations, categories and split metadata, persisted as
//! COCO-style JSON in a canonical byte-stable form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Boxes may touch the image border up to this slack (pixels).
const BOUNDS_SLACK: f64 = 1e-6;

/// `[x, y, w, h]`, top-left origin, pixels.
pub type BBox = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split {other:?}"))),
        }
    }
}

/// Map from sample id to its split.
pub type SplitAssignment = BTreeMap<u64, Split>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Sample {
    pub fn new(id: u64, image_path: impl Into<String>, width: u32, height: u32) -> Self {
        Sample {
            id,
            image_path: image_path.into(),
            width,
            height,
            tags: BTreeSet::new(),
            confidence: None,
            uncertainty: None,
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub sample_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub categories: Vec<Category>,
    #[serde(default)]
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            meta: BTreeMap::new(),
            categories: Vec::new(),
            samples: Vec::new(),
            annotations: Vec::new(),
        }
    }
}

pub(crate) fn check_bbox(id: u64, bbox: &BBox, width: u32, height: u32) -> Result<()> {
    let [x, y, w, h] = *bbox;
    let bad = |message: String| Err(Error::InvalidRecord { id, message });
    if !bbox.iter().all(|v| v.is_finite()) {
        return bad(format!("non-finite bbox {bbox:?}"));
    }
    if w <= 0.0 || h <= 0.0 {
        return bad(format!("degenerate bbox {bbox:?}"));
    }
    let (wf, hf) = (f64::from(width), f64::from(height));
    if x < -BOUNDS_SLACK
        || y < -BOUNDS_SLACK
        || x + w > wf + BOUNDS_SLACK
        || y + h > hf + BOUNDS_SLACK
    {
        return bad(format!("bbox {bbox:?} outside {width}x{height} image"));
    }
    Ok(())
}

fn check_unit(id: u64, what: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(v) if !(v.is_finite() && (0.0..=1.0).contains(&v)) => Err(Error::InvalidRecord {
            id,
            message: format!("{what} {v} outside [0, 1]"),
        }),
        _ => Ok(()),
    }
}

impl DatasetManifest {
    pub fn new(categories: Vec<Category>) -> Self {
        DatasetManifest {
            categories,
            ..Default::default()
        }
    }

    /// Checks every type invariant; the first violation is returned.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        let mut categories = BTreeSet::new();
        for c in &self.categories {
            if !categories.insert(c.id) {
                return Err(Error::DuplicateId {
                    what: "category",
                    id: c.id,
                });
            }
        }
        let mut samples = BTreeMap::new();
        for s in &self.samples {
            if samples.insert(s.id, s).is_some() {
                return Err(Error::DuplicateId {
                    what: "sample",
                    id: s.id,
                });
            }
            if s.width == 0 || s.height == 0 {
                return Err(Error::InvalidRecord {
                    id: s.id,
                    message: "zero image dimension".into(),
                });
            }
            check_unit(s.id, "confidence", s.confidence)?;
            check_unit(s.id, "uncertainty", s.uncertainty)?;
        }
        if !self.annotations.is_empty() && self.categories.is_empty() {
            return Err(Error::Empty("categories (annotations present)"));
        }
        let mut annotations = BTreeSet::new();
        for a in &self.annotations {
            if !annotations.insert(a.id) {
                return Err(Error::DuplicateId {
                    what: "annotation",
                    id: a.id,
                });
            }
            let sample = samples.get(&a.sample_id).ok_or(Error::Dangling {
                annotation: a.id,
                what: "sample",
                id: a.sample_id,
            })?;
            if !categories.contains(&a.category_id) {
                return Err(Error::Dangling {
                    annotation: a.id,
                    what: "category",
                    id: a.category_id,
                });
            }
            check_bbox(a.id, &a.bbox, sample.width, sample.height)?;
            check_unit(a.id, "score", a.score)?;
        }
        Ok(())
    }

    /// Sorts every record list by id.
    pub fn canonicalize(&mut self) {
        self.categories.sort_by_key(|c| c.id);
        self.samples.sort_by_key(|s| s.id);
        self.annotations.sort_by_key(|a| a.id);
    }

    pub fn canonical(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// Canonical serialization: sorted keys, records sorted by id, shortest
    /// round-trip float formatting, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        self.validate()?;
        let mut m = self.clone();
        m.canonicalize();
        canonical_string(&m)
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        // Version is checked before the full decode so old files report it clearly.
        if let Some(found) = value.get("schema_version").and_then(Value::as_u64) {
            if found != u64::from(SCHEMA_VERSION) {
                return Err(Error::SchemaVersion {
                    expected: SCHEMA_VERSION,
                    found: found as u32,
                });
            }
        }
        let m: DatasetManifest = serde_json::from_value(value).map_err(|e| Error::parse(origin, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn sample(&self, id: u64) -> Option<&Sample> {
        self.samples
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.samples[i])
            .or_else(|| self.samples.iter().find(|s| s.id == id))
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn max_sample_id(&self) -> Option<u64> {
        self.samples.iter().map(|s| s.id).max()
    }

    pub fn annotations_of(&self, sample_id: u64) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .iter()
            .filter(move |a| a.sample_id == sample_id)
    }

    /// Restricts the manifest to the given samples and their annotations.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> DatasetManifest {
        DatasetManifest {
            schema_version: self.schema_version,
            meta: self.meta.clone(),
            categories: self.categories.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.id))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.sample_id))
                .cloned()
                .collect(),
        }
        .canonical()
    }

    /// Writes each sample's split field from the assignment; samples not in
    /// the assignment keep theirs.
    pub fn apply_splits(&mut self, assignment: &SplitAssignment) {
        for s in &mut self.samples {
            if let Some(split) = assignment.get(&s.id) {
                s.split = Some(*split);
            }
        }
    }

    pub fn ids_in_split(&self, split: Split) -> BTreeSet<u64> {
        self.samples
            .iter()
            .filter(|s| s.split == Some(split))
            .map(|s| s.id)
            .collect()
    }
}

/// Serializes any value to canonical JSON text.
pub fn canonical_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)
        .map_err(|e| Error::InvalidParameter(format!("unserializable value: {e}")))?;
    if contains_null_float(&v) {
        return Err(Error::InvalidParameter("non-finite number".into()));
    }
    let mut out = serde_json::to_string_pretty(&sort_keys(v))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    out.push('\n');
    Ok(out)
}

// serde_json maps NaN/inf to null; no schema here uses a bare null inside a
// numeric array, so any null inside an array is a rejected float.
fn contains_null_float(v: &Value) -> bool {
    match v {
        Value::Array(items) => items
            .iter()
            .any(|i| i.is_null() || contains_null_float(i)),
        Value::Object(map) => map.values().any(contains_null_float),
        _ => false,
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Writes bytes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_to_string(path)?;
    DatasetManifest::from_json_str(&text, path)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = manifest.to_canonical_json()?;
    write_atomic(path, text.as_bytes())
}

fn merge_records<T: Clone + PartialEq>(
    what: &'static str,
    a: &[T],
    b: &[T],
    id: impl Fn(&T) -> u64,
) -> Result<Vec<T>> {
    let mut out: BTreeMap<u64, T> = BTreeMap::new();
    for r in a.iter().chain(b) {
        match out.get(&id(r)) {
            Some(existing) if existing != r => return Err(Error::Conflict { what, id: id(r) }),
            Some(_) => {}
            None => {
                out.insert(id(r), r.clone());
            }
        }
    }
    Ok(out.into_values().collect())
}

/// Set-union by id. Records sharing an id must be identical; meta keys that
/// disagree resolve to the lexicographically smaller value so the merge stays
/// commutative and associative.
pub fn merge_manifests(a: &DatasetManifest, b: &DatasetManifest) -> Result<DatasetManifest> {
    let mut categories: BTreeMap<u64, Category> = BTreeMap::new();
    for c in a.categories.iter().chain(&b.categories) {
        match categories.get(&c.id) {
            Some(existing) if existing.name != c.name => {
                return Err(Error::CategoryClash {
                    id: c.id,
                    left: existing.name.clone(),
                    right: c.name.clone(),
                })
            }
            Some(_) => {}
            None => {
                categories.insert(c.id, c.clone());
            }
        }
    }
    let mut meta = a.meta.clone();
    for (k, v) in &b.meta {
        meta.entry(k.clone())
            .and_modify(|cur| {
                if v < cur {
                    *cur = v.clone();
                }
            })
            .or_insert_with(|| v.clone());
    }
    let merged = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        meta,
        categories: categories.into_values().collect(),
        samples: merge_records("sample", &a.samples, &b.samples, |s| s.id)?,
        annotations: merge_records("annotation", &a.annotations, &b.annotations, |x| x.id)?,
    };
    merged.validate()?;
    Ok(merged)
}
