use std::path::Path;

use corecurate::augment::save_png;
use corecurate::manifest::{save_manifest, Category, DatasetManifest, Sample};
use corecurate::pipeline::ScorerConfig;
use corecurate::rng::rng_for;
use corecurate::scoring::stub::StubScorer;
use corecurate::scoring::CornerCaseSet;
use image::{Rgb, RgbImage};
use rand::Rng;

use crate::{corecurate, ensure, err, Outcome};

const SAMPLES: u64 = 64;
const SEED: u64 = 11;
const PROMPTS: [&str; 3] = ["a road in dense fog", "headlights in fog", "low visibility street"];

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(id, C)` ranked by confidence descending, then id ascending.
fn exhaustive_ranking(dir: &Path, ids: &[u64]) -> Result<Vec<(u64, f64)>, String> {
    let stub = StubScorer::new(ScorerConfig::default().stub_dim, SEED);
    let prompts: Vec<Vec<f64>> = PROMPTS.iter().map(|p| stub.embed_text(p)).collect::<Result<_, _>>().map_err(err)?;
    let mut ranked = Vec::new();
    for &id in ids {
        let v: Vec<f64> = stub.embed_image(&dir.join(format!("{id}.png"))).map_err(err)?;
        let best = prompts
            .iter()
            .map(|p| dot(&v, p) / (dot(&v, &v).sqrt() * dot(p, p).sqrt()))
            .fold(f64::NEG_INFINITY, f64::max);
        ranked.push((id, ((best + 1.0) / 2.0).clamp(0.0, 1.0)));
    }
    // Exhaustive pairwise ordering: position = number of samples ranked ahead.
    let ahead = |a: &(u64, f64), b: &(u64, f64)| b.1 > a.1 || (b.1 == a.1 && b.0 < a.0);
    let mut out = vec![(0, 0.0); ranked.len()];
    for a in &ranked {
        let pos = ranked.iter().filter(|b| ahead(a, b)).count();
        out[pos] = *a;
    }
    Ok(out)
}

fn extract(dir: &Path, rule: &[&str], tag: &str) -> Result<Vec<(u64, f64)>, String> {
    let out = dir.join(tag);
    let status = corecurate()
        .args(["--scorer", "stub", "--seed", &SEED.to_string(), "--out"])
        .arg(&out)
        .arg("extract")
        .arg("--manifest")
        .arg(dir.join("pool.json"))
        .arg("--prompts")
        .arg(dir.join("prompts.json"))
        .args(rule)
        .output()
        .map_err(err)?;
    ensure(status.status.success(), || {
        format!("extract {rule:?} failed: {}", String::from_utf8_lossy(&status.stderr))
    })?;
    let text = std::fs::read_to_string(out.join("corner_set.json")).map_err(err)?;
    let set: CornerCaseSet = serde_json::from_str(&text).map_err(err)?;
    Ok(set.members.iter().map(|m| (m.sample_id, m.confidence)).collect())
}

fn agree(got: &[(u64, f64)], want: &[(u64, f64)], what: &str) -> Result<(), String> {
    ensure(got.len() == want.len(), || format!("{what}: {} members, oracle {}", got.len(), want.len()))?;
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        ensure(g.0 == w.0 && (g.1 - w.1).abs() <= 1e-12, || {
            format!("{what}: rank {i} is {g:?}, oracle {w:?}")
        })?;
    }
    Ok(())
}

pub fn run() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let dir = tmp.path();
    let mut rng = rng_for(0xe87, &[]);
    let mut manifest = DatasetManifest::new(vec![Category {
        id: 0,
        name: "scene".into(),
    }]);
    let mut ids = Vec::new();
    let mut images: Vec<RgbImage> = Vec::new();
    for k in 0..SAMPLES {
        let id = 1000 + (k * 37) % SAMPLES;
        // Every eighth image repeats an earlier one byte for byte, which ties
        // its confidence with the original.
        let img = if k % 8 == 7 {
            images[(k / 2) as usize].clone()
        } else {
            RgbImage::from_fn(8, 8, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
        };
        save_png(&img, &dir.join(format!("{id}.png"))).map_err(err)?;
        manifest.samples.push(Sample::new(id, format!("{id}.png"), 8, 8));
        images.push(img);
        ids.push(id);
    }
    save_manifest(&manifest, &dir.join("pool.json")).map_err(err)?;
    let prompts = serde_json::json!({"scenario": "fog", "prompts": PROMPTS});
    std::fs::write(dir.join("prompts.json"), prompts.to_string()).map_err(err)?;

    let ranking = exhaustive_ranking(dir, &ids)?;
    let ties: Vec<usize> = (1..ranking.len()).filter(|&i| ranking[i].1 == ranking[i - 1].1).collect();
    ensure(!ties.is_empty(), || "fixture has no confidence ties".into())?;

    let full = extract(dir, &["--top-k", &SAMPLES.to_string()], "all")?;
    agree(&full, &ranking, "full ranking")?;
    let mut checked_k = vec![SAMPLES as usize];

    // A threshold equal to a tied confidence (as the engine computes it, so
    // the boundary is exact), and a k that splits that tie.
    let cut = ties[ties.len() / 2];
    let theta = full[cut].1;
    let by_threshold: Vec<(u64, f64)> = ranking.iter().copied().filter(|m| m.1 >= ranking[cut].1).collect();
    ensure(by_threshold.len() > cut, || "threshold excludes the tie".into())?;
    agree(&extract(dir, &["--threshold", &format!("{theta:?}")], "thr")?, &by_threshold, "threshold")?;
    for k in [1, cut, 16] {
        agree(&extract(dir, &["--top-k", &k.to_string()], &format!("top{k}"))?, &ranking[..k], &format!("top-{k}"))?;
        checked_k.push(k);
    }
    Ok(format!(
        "{SAMPLES} samples, {} tied pairs; threshold {theta:.6} and top-k {checked_k:?} match",
        ties.len()
    ))
}
