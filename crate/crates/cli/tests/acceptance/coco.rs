//! Scalar re-derivation of the COCO box evaluator (single "all" area range,
//! no crowd regions) checked against the engine.

use corecurate::eval::{compute_metrics, Detection, GroundTruth};
use corecurate::rng::rng_for;
use rand::Rng;

use crate::{ensure, Outcome};

const SCENES: u64 = 600;
const TOL: f64 = 1e-9;
const MAX_DETS: [usize; 3] = [1, 10, 100];

fn linspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    let step = (stop - start) / (num - 1) as f64;
    let mut v: Vec<f64> = (0..num).map(|i| i as f64 * step + start).collect();
    v[num - 1] = stop;
    v
}

fn box_iou(d: &[f64; 4], g: &[f64; 4]) -> f64 {
    let iw = (d[0] + d[2]).min(g[0] + g[2]) - d[0].max(g[0]);
    if iw <= 0.0 {
        return 0.0;
    }
    let ih = (d[1] + d[3]).min(g[1] + g[3]) - d[1].max(g[1]);
    if ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (d[2] * d[3] + g[2] * g[3] - inter)
}

/// Stable insertion sort of indices by descending key.
fn stable_desc(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = Vec::with_capacity(keys.len());
    for i in 0..keys.len() {
        let mut pos = idx.len();
        while pos > 0 && keys[idx[pos - 1]] < keys[i] {
            pos -= 1;
        }
        idx.insert(pos, i);
    }
    idx
}

struct ImageResult {
    scores: Vec<f64>,
    /// matched[t][d]
    matched: Vec<Vec<bool>>,
    n_gt: usize,
}

fn evaluate_image(dets: &[&Detection], gts: &[&GroundTruth], thresholds: &[f64]) -> Option<ImageResult> {
    if dets.is_empty() && gts.is_empty() {
        return None;
    }
    let keys: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order: Vec<usize> = stable_desc(&keys).into_iter().take(100).collect();
    let mut matched = vec![vec![false; order.len()]; thresholds.len()];
    for (t, &thr) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gts.len()];
        for (di, &d) in order.iter().enumerate() {
            let mut best = thr.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, g) in gts.iter().enumerate() {
                if gt_taken[gi] {
                    continue;
                }
                let v = box_iou(&dets[d].bbox, &g.bbox);
                if v < best {
                    continue;
                }
                best = v;
                m = Some(gi);
            }
            if let Some(gi) = m {
                gt_taken[gi] = true;
                matched[t][di] = true;
            }
        }
    }
    Some(ImageResult {
        scores: order.iter().map(|&d| dets[d].score).collect(),
        matched,
        n_gt: gts.len(),
    })
}

/// `[AP, AP50, AP75, AR1, AR10, AR100]`, or `None` without ground truth.
pub fn reference(dets: &[Detection], gts: &[GroundTruth], cats: &[u64]) -> Option<[f64; 6]> {
    let thresholds = linspace(0.5, 0.95, 10);
    let rec_thrs = linspace(0.0, 1.0, 101);
    let mut images: Vec<u64> = dets.iter().map(|d| d.sample_id).chain(gts.iter().map(|g| g.sample_id)).collect();
    images.sort_unstable();
    images.dedup();
    let mut cats = cats.to_vec();
    cats.sort_unstable();
    cats.dedup();
    let nt = thresholds.len();
    // precision[t][r][c][m], recall[t][c][m]; -1 marks "no ground truth".
    let mut precision = vec![vec![vec![[-1.0f64; 3]; cats.len()]; rec_thrs.len()]; nt];
    let mut recall = vec![vec![[-1.0f64; 3]; cats.len()]; nt];
    for (ci, &c) in cats.iter().enumerate() {
        let evals: Vec<ImageResult> = images
            .iter()
            .filter_map(|&img| {
                let d: Vec<&Detection> = dets.iter().filter(|d| d.sample_id == img && d.category_id == c).collect();
                let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.sample_id == img && g.category_id == c).collect();
                evaluate_image(&d, &g, &thresholds)
            })
            .collect();
        for (mi, &max_det) in MAX_DETS.iter().enumerate() {
            let n_gt: usize = evals.iter().map(|e| e.n_gt).sum();
            if n_gt == 0 {
                continue;
            }
            let mut scores = Vec::new();
            let mut which = Vec::new();
            for (e_i, e) in evals.iter().enumerate() {
                for d in 0..e.scores.len().min(max_det) {
                    scores.push(e.scores[d]);
                    which.push((e_i, d));
                }
            }
            let order = stable_desc(&scores);
            let nd = order.len();
            for t in 0..nt {
                let mut tp = 0.0;
                let mut fp = 0.0;
                let mut rc = vec![0.0; nd];
                let mut pr = vec![0.0; nd];
                for (k, &o) in order.iter().enumerate() {
                    let (e_i, d) = which[o];
                    if evals[e_i].matched[t][d] {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                    rc[k] = tp / n_gt as f64;
                    pr[k] = tp / (fp + tp + f64::EPSILON);
                }
                recall[t][ci][mi] = if nd > 0 { rc[nd - 1] } else { 0.0 };
                for k in (1..nd).rev() {
                    if pr[k] > pr[k - 1] {
                        pr[k - 1] = pr[k];
                    }
                }
                for (r, &thr) in rec_thrs.iter().enumerate() {
                    // First index with rc >= thr (searchsorted, side left).
                    let mut pos = 0;
                    while pos < nd && rc[pos] < thr {
                        pos += 1;
                    }
                    precision[t][r][ci][mi] = if pos < nd { pr[pos] } else { 0.0 };
                }
            }
        }
    }
    let mean_valid = |vals: Vec<f64>| -> Option<f64> {
        let v: Vec<f64> = vals.into_iter().filter(|&x| x > -1.0).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let ap_at = |ts: &[usize]| -> Option<f64> {
        let mut v = Vec::new();
        for &t in ts {
            for r in 0..rec_thrs.len() {
                for ci in 0..cats.len() {
                    v.push(precision[t][r][ci][2]);
                }
            }
        }
        mean_valid(v)
    };
    let ar_at = |m: usize| -> Option<f64> {
        let mut v = Vec::new();
        for row in recall.iter().take(nt) {
            for cell in row.iter().take(cats.len()) {
                v.push(cell[m]);
            }
        }
        mean_valid(v)
    };
    let all: Vec<usize> = (0..nt).collect();
    let t50: Vec<usize> = thresholds.iter().position(|&t| t == 0.5).into_iter().collect();
    let t75: Vec<usize> = thresholds.iter().position(|&t| t == 0.75).into_iter().collect();
    Some([ap_at(&all)?, ap_at(&t50)?, ap_at(&t75)?, ar_at(0)?, ar_at(1)?, ar_at(2)?])
}

fn jitter(rng: &mut impl Rng, b: [f64; 4], amount: f64) -> [f64; 4] {
    let mut j = |v: f64, s: f64| v + s * amount * rng.random_range(-1.0..1.0);
    let w = j(b[2], b[2]).max(1.0);
    let h = j(b[3], b[3]).max(1.0);
    [j(b[0], b[2]), j(b[1], b[3]), w, h]
}

fn scene(k: u64) -> (Vec<Detection>, Vec<GroundTruth>, Vec<u64>) {
    let mut rng = rng_for(0xc0c0, &[k]);
    let cats: Vec<u64> = (1..=rng.random_range(1..=3u64)).collect();
    let images = rng.random_range(1..=5u64);
    let discrete = rng.random_bool(0.5);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 0..images {
        let n_gt = rng.random_range(0..=6);
        let first = gts.len();
        for _ in 0..n_gt {
            let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
            let (w, h) = (rng.random_range(2.0..40.0), rng.random_range(2.0..40.0));
            gts.push(GroundTruth {
                sample_id: img,
                category_id: cats[rng.random_range(0..cats.len())],
                bbox: [x, y, w, h],
            });
        }
        // Near-duplicate ground truths make matching order matter.
        if n_gt >= 2 && rng.random_bool(0.3) {
            let g = gts[first].clone();
            gts[first + 1] = GroundTruth {
                bbox: jitter(&mut rng, g.bbox, 0.05),
                ..g
            };
        }
        let mine: Vec<GroundTruth> = gts[first..].to_vec();
        for _ in 0..rng.random_range(0..=6) {
            let score = if discrete {
                f64::from(rng.random_range(1..=4u32)) / 4.0
            } else {
                rng.random::<f64>()
            };
            let (category_id, bbox) = if !mine.is_empty() && rng.random_bool(0.7) {
                let g = &mine[rng.random_range(0..mine.len())];
                let c = if rng.random_bool(0.9) {
                    g.category_id
                } else {
                    cats[rng.random_range(0..cats.len())]
                };
                let amount = rng.random_range(0.0..0.4);
                (c, jitter(&mut rng, g.bbox, amount))
            } else {
                let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
                (
                    cats[rng.random_range(0..cats.len())],
                    [x, y, rng.random_range(2.0..40.0), rng.random_range(2.0..40.0)],
                )
            };
            dets.push(Detection {
                sample_id: img,
                category_id,
                bbox,
                score,
            });
        }
    }
    (dets, gts, cats)
}

pub fn run() -> Outcome {
    let mut compared = 0;
    let mut empty = 0;
    let mut worst = 0.0f64;
    let names = ["AP", "AP50", "AP75", "AR1", "AR10", "AR100"];
    for k in 0..SCENES {
        let (dets, gts, cats) = scene(k);
        let engine = compute_metrics(&dets, &gts, &cats);
        match (reference(&dets, &gts, &cats), engine) {
            (None, Err(_)) => empty += 1,
            (Some(want), Ok(got)) => {
                for (i, (g, w)) in got.columns().iter().zip(&want).enumerate() {
                    let d = (g - w).abs();
                    worst = worst.max(d);
                    ensure(d <= TOL, || format!("scene {k}: {} is {g}, reference {w}", names[i]))?;
                }
                compared += 1;
            }
            (want, got) => return Err(format!("scene {k}: reference {want:?}, engine {got:?}")),
        }
    }
    ensure(compared >= 500, || format!("only {compared} scenes had ground truth"))?;

    // One object per image and category, so even AR1 can reach 1.
    let cats: Vec<u64> = vec![1, 2, 3];
    let gts: Vec<GroundTruth> = (0..5u64)
        .flat_map(|img| {
            cats.iter().map(move |&c| GroundTruth {
                sample_id: img,
                category_id: c,
                bbox: [3.0 * c as f64, 2.0 * img as f64, 10.0 + c as f64, 12.0],
            })
        })
        .collect();
    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            sample_id: g.sample_id,
            category_id: g.category_id,
            bbox: g.bbox,
            score: 1.0,
        })
        .collect();
    let report = compute_metrics(&perfect, &gts, &cats).map_err(crate::err)?;
    for (i, v) in report.columns().iter().enumerate() {
        ensure((v - 1.0).abs() <= TOL, || format!("perfect detector {} = {v}", names[i]))?;
    }
    Ok(format!(
        "{compared} scenes within {TOL:e} (max diff {worst:e}), {empty} without ground truth, perfect detector 1.0"
    ))
}
