//! COCO-style detection metrics and forgetting reports.
//!
//! Semantics follow the reference COCO evaluator for bounding boxes with a
//! single "all" area range: per image and category the top 100 detections by
//! score are matched greedily, precision is interpolated at 101 recall points
//! and averaged over IoU thresholds 0.50:0.05:0.95.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{canonical_string, read_to_string, write_atomic, Annotation, BBox};

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const NUM_RECALL_POINTS: usize = 101;
pub const MAX_DETS: [usize; 3] = [1, 10, 100];

/// `0.50, 0.55, …, 0.95`, computed the way the reference evaluator does.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    let step = (0.95f64 - 0.5) / 9.0;
    let mut t = [0.0; NUM_IOU_THRESHOLDS];
    for (i, v) in t.iter_mut().enumerate() {
        *v = i as f64 * step + 0.5;
    }
    t[NUM_IOU_THRESHOLDS - 1] = 0.95;
    t
}

pub fn recall_points() -> [f64; NUM_RECALL_POINTS] {
    let step = 1.0f64 / 100.0;
    let mut r = [0.0; NUM_RECALL_POINTS];
    for (i, v) in r.iter_mut().enumerate() {
        *v = i as f64 * step;
    }
    r[NUM_RECALL_POINTS - 1] = 1.0;
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "image_id", alias = "sample_id")]
    pub sample_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        check_box(&self.bbox)?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidParameter(format!(
                "detection score {} outside [0, 1] on sample {}",
                self.score, self.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
}

impl From<&Annotation> for GroundTruth {
    fn from(a: &Annotation) -> Self {
        GroundTruth {
            sample_id: a.sample_id,
            category_id: a.category_id,
            bbox: a.bbox,
        }
    }
}

fn check_box(b: &BBox) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) && b[2] > 0.0 && b[3] > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("degenerate box {b:?}")))
    }
}

fn raw_iou(d: &BBox, g: &BBox) -> f64 {
    let w = (d[2] + d[0]).min(g[2] + g[0]) - d[0].max(g[0]);
    if w <= 0.0 {
        return 0.0;
    }
    let h = (d[3] + d[1]).min(g[3] + g[1]) - d[1].max(g[1]);
    if h <= 0.0 {
        return 0.0;
    }
    let i = w * h;
    let u = d[2] * d[3] + g[2] * g[3] - i;
    i / u
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    Ok(raw_iou(a, b))
}

/// Greedy one-to-one matching of score-sorted detections against ground
/// truths. On equal IoU the later ground truth wins.
fn greedy(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gt];
    ious.iter()
        .map(|row| {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut m = None;
            for (g, &v) in row.iter().enumerate() {
                if taken[g] || v < best {
                    continue;
                }
                best = v;
                m = Some(g);
            }
            if let Some(g) = m {
                taken[g] = true;
            }
            m
        })
        .collect()
}

/// Indices of `dets` sorted by descending score; ties keep input order.
fn score_order(dets: &[&Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    idx
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// For each input detection, the index of its matched ground truth.
    pub detection_to_gt: Vec<Option<usize>>,
    pub gt_to_detection: Vec<Option<usize>>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.detection_to_gt.iter().flatten().count()
    }
}

/// Matches per (sample, category); detections are considered in score order.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Matching {
    let mut groups: BTreeMap<(u64, u64), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((d.sample_id, d.category_id)).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        groups.entry((g.sample_id, g.category_id)).or_default().1.push(i);
    }
    let mut out = Matching {
        detection_to_gt: vec![None; dets.len()],
        gt_to_detection: vec![None; gts.len()],
    };
    for (di, gi) in groups.values() {
        let group: Vec<&Detection> = di.iter().map(|&i| &dets[i]).collect();
        let order = score_order(&group);
        let ious: Vec<Vec<f64>> = order
            .iter()
            .map(|&o| gi.iter().map(|&g| raw_iou(&group[o].bbox, &gts[g].bbox)).collect())
            .collect();
        for (k, m) in greedy(&ious, gi.len(), iou_threshold).into_iter().enumerate() {
            if let Some(g) = m {
                let d = di[order[k]];
                out.detection_to_gt[d] = Some(gi[g]);
                out.gt_to_detection[gi[g]] = Some(d);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category_id: u64,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AR100")]
    pub ar100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    #[serde(rename = "AR100")]
    pub ar100: f64,
    pub per_category: Vec<CategoryMetrics>,
}

impl MetricReport {
    pub fn columns(&self) -> [f64; 6] {
        [self.ap, self.ap50, self.ap75, self.ar1, self.ar10, self.ar100]
    }
}

pub const TABLE_HEADER: [&str; 6] = ["AP", "AP50", "AP75", "AR1", "AR10", "AR100"];

/// Aligned text table, one row per labelled report, values in percent.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(4);
    let mut out = format!("{:<width$}", "");
    for h in TABLE_HEADER {
        let _ = write!(out, " {h:>6}");
    }
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "{label:<width$}");
        for v in r.columns() {
            let _ = write!(out, " {:>6.1}", v * 100.0);
        }
        out.push('\n');
    }
    out
}

struct ImageEval {
    /// Scores of the kept detections, descending.
    scores: Vec<f64>,
    /// `matched[d][t]`: detection `d` is a true positive at threshold `t`.
    matched: Vec<[bool; NUM_IOU_THRESHOLDS]>,
    n_gt: usize,
}

fn evaluate_image(dets: &[&Detection], gts: &[&GroundTruth], thresholds: &[f64]) -> ImageEval {
    let max_det = MAX_DETS[MAX_DETS.len() - 1];
    let order = score_order(dets);
    let kept: Vec<&Detection> = order.iter().take(max_det).map(|&i| dets[i]).collect();
    let ious: Vec<Vec<f64>> = kept
        .iter()
        .map(|d| gts.iter().map(|g| raw_iou(&d.bbox, &g.bbox)).collect())
        .collect();
    let mut matched = vec![[false; NUM_IOU_THRESHOLDS]; kept.len()];
    for (t, &thr) in thresholds.iter().enumerate() {
        for (d, m) in greedy(&ious, gts.len(), thr).into_iter().enumerate() {
            matched[d][t] = m.is_some();
        }
    }
    ImageEval {
        scores: kept.iter().map(|d| d.score).collect(),
        matched,
        n_gt: gts.len(),
    }
}

/// Per category: precision at each recall point and final recall, for one
/// threshold and detection limit. `None` when the category has no ground truth.
fn accumulate(
    evals: &[ImageEval],
    max_det: usize,
    recall_pts: &[f64],
) -> Option<(Vec<[f64; NUM_RECALL_POINTS]>, Vec<f64>)> {
    let n_gt: usize = evals.iter().map(|e| e.n_gt).sum();
    if n_gt == 0 {
        return None;
    }
    let mut flat: Vec<(f64, &[bool; NUM_IOU_THRESHOLDS])> = Vec::new();
    for e in evals {
        for (s, m) in e.scores.iter().zip(&e.matched).take(max_det) {
            flat.push((*s, m));
        }
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(NUM_IOU_THRESHOLDS);
    let mut recall = Vec::with_capacity(NUM_IOU_THRESHOLDS);
    for t in 0..NUM_IOU_THRESHOLDS {
        let mut tp = 0.0f64;
        let mut fp = 0.0f64;
        let mut rc = Vec::with_capacity(flat.len());
        let mut pr = Vec::with_capacity(flat.len());
        for (_, m) in &flat {
            if m[t] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / n_gt as f64);
            pr.push(tp / (fp + tp + f64::EPSILON));
        }
        recall.push(rc.last().copied().unwrap_or(0.0));
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let mut q = [0.0; NUM_RECALL_POINTS];
        for (r, &pt) in recall_pts.iter().enumerate() {
            let pos = rc.partition_point(|&v| v < pt);
            if pos < pr.len() {
                q[r] = pr[pos];
            }
        }
        precision.push(q);
    }
    Some((precision, recall))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Computes AP, AP50, AP75, AR1, AR10 and AR100 over `categories`.
/// Categories without ground truth are left out of every mean.
pub fn compute_metrics(dets: &[Detection], gts: &[GroundTruth], categories: &[u64]) -> Result<MetricReport> {
    let cats: BTreeSet<u64> = categories.iter().copied().collect();
    for d in dets {
        d.validate()?;
        if !cats.contains(&d.category_id) {
            return Err(Error::UnknownCategory(d.category_id));
        }
    }
    for g in gts {
        check_box(&g.bbox)?;
        if !cats.contains(&g.category_id) {
            return Err(Error::UnknownCategory(g.category_id));
        }
    }
    let mut dmap: BTreeMap<(u64, u64), Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        dmap.entry((d.category_id, d.sample_id)).or_default().push(d);
    }
    let mut gmap: BTreeMap<(u64, u64), Vec<&GroundTruth>> = BTreeMap::new();
    for g in gts {
        gmap.entry((g.category_id, g.sample_id)).or_default().push(g);
    }
    let keys: BTreeSet<(u64, u64)> = dmap.keys().chain(gmap.keys()).copied().collect();
    let keys: Vec<(u64, u64)> = keys.into_iter().collect();
    let thresholds = iou_thresholds();
    let recall_pts = recall_points();
    let evals: Vec<ImageEval> = keys
        .par_iter()
        .map(|k| {
            let d = dmap.get(k).map(Vec::as_slice).unwrap_or(&[]);
            let g = gmap.get(k).map(Vec::as_slice).unwrap_or(&[]);
            evaluate_image(d, g, &thresholds)
        })
        .collect();

    let mut ap_all = Vec::new();
    let mut ap50 = Vec::new();
    let mut ap75 = Vec::new();
    let mut ar: [Vec<f64>; 3] = Default::default();
    let mut per_category = Vec::new();
    let t75 = thresholds.iter().position(|&t| t == 0.75);
    for &c in &cats {
        let lo = keys.partition_point(|k| k.0 < c);
        let hi = keys.partition_point(|k| k.0 <= c);
        let cat_evals = &evals[lo..hi];
        let mut cat_ap = Vec::new();
        let mut cat_ar100 = Vec::new();
        for (m, &max_det) in MAX_DETS.iter().enumerate() {
            let Some((precision, recall)) = accumulate(cat_evals, max_det, &recall_pts) else {
                continue;
            };
            ar[m].extend_from_slice(&recall);
            if max_det == MAX_DETS[MAX_DETS.len() - 1] {
                for (t, q) in precision.iter().enumerate() {
                    cat_ap.extend_from_slice(q);
                    if t == 0 {
                        ap50.extend_from_slice(q);
                    }
                    if Some(t) == t75 {
                        ap75.extend_from_slice(q);
                    }
                }
                cat_ar100 = recall;
            }
        }
        if !cat_ap.is_empty() {
            ap_all.extend_from_slice(&cat_ap);
            per_category.push(CategoryMetrics {
                category_id: c,
                ap: mean(&cat_ap),
                ar100: mean(&cat_ar100),
            });
        }
    }
    if ap_all.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    Ok(MetricReport {
        ap: mean(&ap_all),
        ap50: mean(&ap50),
        ap75: mean(&ap75),
        ar1: mean(&ar[0]),
        ar10: mean(&ar[1]),
        ar100: mean(&ar[2]),
        per_category,
    })
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = read_to_string(path)?;
    let dets: Vec<Detection> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    for d in &dets {
        d.validate()?;
    }
    Ok(dets)
}

pub fn save_detections(dets: &[Detection], path: &Path) -> Result<()> {
    write_atomic(path, canonical_string(&dets)?.as_bytes())
}

/// Metric values per task after each iteration; `history[i]` holds the tasks
/// evaluated after iteration `i`.
pub type History = [BTreeMap<String, f64>];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskForgetting {
    pub task: String,
    /// Iteration at which the task was first evaluated.
    pub introduced: usize,
    pub final_value: f64,
    pub peak: f64,
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub tasks: Vec<TaskForgetting>,
    /// `matrix[i][j]`: value of task `j` (in `tasks` order) after iteration `i`.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Mean over tasks introduced before the last iteration of final minus
    /// the value right after introduction.
    pub backward_transfer: Option<f64>,
}

pub fn forgetting_report(history: &History) -> Result<ForgettingReport> {
    if history.is_empty() {
        return Err(Error::Empty("history"));
    }
    let mut order: Vec<(String, usize)> = Vec::new();
    for (i, row) in history.iter().enumerate() {
        for task in row.keys() {
            if !order.iter().any(|(t, _)| t == task) {
                order.push((task.clone(), i));
            }
        }
    }
    let matrix: Vec<Vec<Option<f64>>> = history
        .iter()
        .map(|row| order.iter().map(|(t, _)| row.get(t).copied()).collect())
        .collect();
    let last = history.len() - 1;
    let mut tasks = Vec::new();
    let mut transfers = Vec::new();
    for (j, (task, introduced)) in order.iter().enumerate() {
        let series: Vec<f64> = matrix.iter().filter_map(|r| r[j]).collect();
        let final_value = *series.last().expect("task has at least one value");
        let peak = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if *introduced < last {
            if let (Some(first), Some(end)) = (matrix[*introduced][j], matrix[last][j]) {
                transfers.push(end - first);
            }
        }
        tasks.push(TaskForgetting {
            task: task.clone(),
            introduced: *introduced,
            final_value,
            peak,
            forgetting: peak - final_value,
        });
    }
    Ok(ForgettingReport {
        tasks,
        matrix,
        backward_transfer: (!transfers.is_empty()).then(|| mean(&transfers)),
    })
}

impl ForgettingReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("iter");
        for t in &self.tasks {
            let _ = write!(out, " {:>10}", t.task);
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            let _ = write!(out, "{i:>4}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {v:>10.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "forget");
        for t in &self.tasks {
            let _ = write!(out, " {:>10.4}", t.forgetting);
        }
        out.push('\n');
        if let Some(b) = self.backward_transfer {
            let _ = writeln!(out, "backward transfer {b:.4}");
        }
        out
    }
}
