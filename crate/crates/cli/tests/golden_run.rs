//! `run-loop` on the generated two-task stream against the committed golden
//! files, with the core selection re-derived independently.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use corecurate::learner::{FeatureDataset, SoftmaxClassifier};
use corecurate::manifest::Split;
use corecurate::partition::AssignmentFile;
use corecurate::pipeline::LoopConfig;
use corecurate::rng::{self, stream};
use corecurate::uncertainty::{CoreDataset, CoreMember};
use serde_json::Value;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/two_task");

struct Run {
    _tmp: tempfile::TempDir,
    fixture: PathBuf,
    run: PathBuf,
    config: LoopConfig,
}

fn reference_run() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = tmp.path().join("fixtures");
    let out = tmp.path().join("out");
    let bin = env!("CARGO_BIN_EXE_corecurate");
    let synth = Command::new(bin).arg("synth").arg("--out").arg(&fixture).output().unwrap();
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    let config_path = fixture.join("two_task.json");
    let run = Command::new(bin)
        .arg("run-loop")
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary["iterations"], 2);
    Run {
        config: LoopConfig::load(&config_path).unwrap(),
        run: out.join("runs/two_task"),
        fixture,
        _tmp: tmp,
    }
}

fn load_core(path: &Path) -> CoreDataset {
    CoreDataset::load(path).unwrap()
}

fn logits(model: &SoftmaxClassifier<f64>, x: &[f64]) -> Vec<f64> {
    let k = model.num_classes();
    let w = model.weights();
    let mut z = model.bias().to_vec();
    for (f, &xf) in x.iter().enumerate() {
        for c in 0..k {
            z[c] += xf * w[f * k + c];
        }
    }
    z
}

fn first_argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// `(id, sigma)` of every candidate with sigma above tau, recomputed with
/// plain loops from the saved parameters.
fn reselect(r: &Run, t: usize) -> BTreeMap<u64, f64> {
    let dir = r.run.join(format!("iter_{t}"));
    let model = SoftmaxClassifier::<f64>::load(&dir.join("params.bin")).unwrap();
    let splits: AssignmentFile = serde_json::from_str(&std::fs::read_to_string(dir.join("splits.json")).unwrap()).unwrap();
    let candidates: BTreeSet<u64> = splits
        .assignment()
        .unwrap()
        .into_iter()
        .filter(|(_, s)| *s != Split::Test)
        .map(|(id, _)| id)
        .collect();
    let task = &r.config.tasks[t - 1];
    let features = FeatureDataset::load(&r.fixture.join(&task.features)).unwrap();
    let by_id: BTreeMap<u64, &Vec<f64>> = features.samples.iter().map(|s| (s.sample_id, &s.features)).collect();
    let seed = rng::key(r.config.seed, &[t as u64, stream::PERTURB]);
    let n = r.config.n_perturb;
    let mut out = BTreeMap::new();
    for id in candidates {
        let x = by_id[&id];
        let mut counts = vec![0usize; model.num_classes()];
        for i in 1..=n {
            let xp: Vec<f64> = r.config.perturbation.apply(x, seed, id, i, n).unwrap();
            counts[first_argmax(&logits(&model, &xp))] += 1;
        }
        let majority = *counts.iter().max().unwrap();
        let sigma = 1.0 - majority as f64 / n as f64;
        if sigma > r.config.tau {
            out.insert(id, sigma);
        }
    }
    out
}

/// Union with the previous core, then evict lowest sigma, oldest, largest id.
fn reunion(prev: &CoreDataset, selected: &BTreeMap<u64, f64>, t: u64) -> Vec<CoreMember> {
    let mut members: Vec<CoreMember> = prev.members.clone();
    for (&id, &sigma) in selected {
        if !members.iter().any(|m| m.sample_id == id) {
            members.push(CoreMember {
                sample_id: id,
                sigma,
                added_at: t,
            });
        }
    }
    if let Some(cap) = prev.capacity {
        while members.len() > cap {
            let mut victim = 0;
            for (i, m) in members.iter().enumerate() {
                let v = &members[victim];
                let worse = m.sigma < v.sigma
                    || (m.sigma == v.sigma && m.added_at < v.added_at)
                    || (m.sigma == v.sigma && m.added_at == v.added_at && m.sample_id > v.sample_id);
                if worse {
                    victim = i;
                }
            }
            members.remove(victim);
        }
    }
    members.sort_by_key(|m| m.sample_id);
    members
}

#[test]
fn reference_run_matches_golden_files_and_scalar_selection() {
    let r = reference_run();
    for t in 0..=2 {
        let name = format!("metrics_iter_{t}.json");
        let got = std::fs::read_to_string(r.run.join(format!("iter_{t}/metrics.json"))).unwrap();
        let want = std::fs::read_to_string(Path::new(GOLDEN).join(&name)).unwrap();
        assert_eq!(got, want, "{name} differs from the golden file");
    }

    let golden_core = load_core(&Path::new(GOLDEN).join("core.json"));
    let final_core = load_core(&r.run.join("iter_2/core.json"));
    assert_eq!(final_core, golden_core);
    assert_eq!(final_core.len(), 100);

    for t in 1..=2 {
        let prev = load_core(&r.run.join(format!("iter_{}/core.json", t - 1)));
        let selected = reselect(&r, t);
        let recorded: Vec<Value> =
            serde_json::from_str(&std::fs::read_to_string(r.run.join(format!("iter_{t}/selection.json"))).unwrap()).unwrap();
        let recorded: BTreeMap<u64, f64> = recorded
            .iter()
            .map(|s| (s["sample_id"].as_u64().unwrap(), s["sigma"].as_f64().unwrap()))
            .collect();
        assert_eq!(recorded, selected, "selection at iteration {t}");

        let mut core = load_core(&r.run.join(format!("iter_{t}/core.json"))).members;
        core.sort_by_key(|m| m.sample_id);
        assert_eq!(core, reunion(&prev, &selected, t as u64), "core at iteration {t}");
    }
}
