use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use corecurate::pipeline::{LoopConfig, LoopState, SweepReport};
use corecurate::synth::SynthConfig;
use serde_json::Value;

use crate::{corecurate, ensure, err, Outcome};

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");

fn scratch() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn run_cli(args: &[&str], paths: &[(&str, &Path)]) -> Result<(), String> {
    let mut cmd = corecurate();
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    let out = cmd.args(args).output().map_err(err)?;
    ensure(out.status.success(), || {
        format!("corecurate {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

/// The generated synthetic stream, shared by every criterion that needs it.
fn fixture() -> Result<PathBuf, String> {
    static DIR: OnceLock<Result<PathBuf, String>> = OnceLock::new();
    DIR.get_or_init(|| {
        let root = scratch();
        if root.exists() {
            std::fs::remove_dir_all(&root).map_err(err)?;
        }
        let dir = root.join("fixtures");
        run_cli(&["synth"], &[("--out", &dir)])?;
        Ok(dir)
    })
    .clone()
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn final_accuracy(out: &Path, run: &str, task: &str) -> Result<f64, String> {
    let state = LoopState::load(&out.join("runs").join(run).join("state.json")).map_err(err)?;
    state
        .final_evaluations()
        .and_then(|e| e.get(task))
        .map(|e| e.accuracy)
        .ok_or_else(|| format!("{run} has no final {task} evaluation"))
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(err)? {
            let p = entry.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(err)?.to_path_buf();
                out.insert(rel, std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

/// The stream must be the one the criteria describe.
fn check_fixture_settings(dir: &Path, config: &LoopConfig) -> Result<(), String> {
    let synth: SynthConfig = serde_json::from_str(&read(&dir.join("synth.json"))?).map_err(err)?;
    ensure(synth.tasks == 2 && synth.classes == 8 && synth.samples_per_task == 2000, || {
        format!("unexpected stream shape {synth:?}")
    })?;
    ensure(
        config.core_capacity == Some(100) && config.tau == 0.4 && config.n_perturb == 5 && config.replay,
        || "fixture config is not capacity 100, tau 0.4, N 5 with replay".into(),
    )
}

pub fn forgetting() -> Outcome {
    let dir = fixture()?;
    let config_path = dir.join("two_task.json");
    let config = LoopConfig::load(&config_path).map_err(err)?;
    check_fixture_settings(&dir, &config)?;

    let mut naive: Value = serde_json::from_str(&read(&config_path)?).map_err(err)?;
    naive["replay"] = Value::Bool(false);
    naive["name"] = Value::String("two_task_naive".into());
    let naive_path = dir.join("two_task_naive.json");
    std::fs::write(&naive_path, naive.to_string()).map_err(err)?;

    let out = scratch().join("forgetting");
    run_cli(&["run-loop"], &[("--config", &config_path), ("--out", &out)])?;
    run_cli(&["run-loop"], &[("--config", &naive_path), ("--out", &out)])?;

    let golden: Value = serde_json::from_str(&read(&Path::new(GOLDEN).join("forgetting_margin.json"))?).map_err(err)?;
    let task = golden["task"].as_str().ok_or("golden file lacks a task")?;
    let margin = golden["margin"].as_f64().ok_or("golden file lacks a margin")?;
    ensure(margin >= 0.15, || format!("golden margin {margin} is below 15 points"))?;

    let replay = final_accuracy(&out, "two_task", task)?;
    let without = final_accuracy(&out, "two_task_naive", task)?;
    let gap = replay - without;
    ensure(gap >= margin, || {
        format!("{task}: replay {replay:.4} vs naive {without:.4}, gap {gap:.4} below golden {margin:.4}")
    })?;
    Ok(format!(
        "{task} final accuracy {:.1} with replay, {:.1} without; gap {:.1} >= golden {:.1} points",
        replay * 100.0,
        without * 100.0,
        gap * 100.0,
        margin * 100.0
    ))
}

pub fn determinism() -> Outcome {
    let dir = fixture()?;
    let config = dir.join("two_task.json");
    let mut trees = Vec::new();
    for jobs in ["1", "8"] {
        let out = scratch().join(format!("jobs{jobs}"));
        run_cli(&["run-loop", "--jobs", jobs], &[("--config", &config), ("--out", &out)])?;
        trees.push(files_under(&out.join("runs"))?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), || "--jobs 1 and --jobs 8 wrote different file sets".into())?;
    for (path, bytes) in a {
        ensure(bytes == &b[path], || format!("{} differs between --jobs 1 and --jobs 8", path.display()))?;
    }
    let must = ["state.json", "iter_2/corner_manifest.json", "iter_2/metrics.json", "iter_2/params.bin"];
    for m in must {
        let p = Path::new("two_task").join(m);
        ensure(a.contains_key(&p), || format!("run did not write {}", p.display()))?;
    }
    Ok(format!("{} files byte-identical", a.len()))
}

pub fn sweep() -> Outcome {
    let dir = fixture()?;
    let out = scratch().join("sweep");
    run_cli(
        &["report", "--sweep-tau", "0.2,0.4,0.6", "--sweep-capacity", "30,100,200"],
        &[("--config", &dir.join("two_task.json")), ("--out", &out)],
    )?;
    let report: SweepReport = serde_json::from_str(&read(&out.join("sweep.json"))?).map_err(err)?;
    let text = read(&out.join("sweep.txt"))?;

    let header = ["AP", "AP50", "AP75", "AR1", "AR10", "AR100"].join(" ");
    let lines: Vec<&str> = text.lines().collect();
    let columns: Vec<String> = lines
        .iter()
        .filter(|l| l.starts_with("tau ") || l.starts_with("core "))
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    ensure(columns.len() == 2, || "sweep table lacks the tau and core sections".into())?;
    for c in &columns {
        let groups: Vec<&str> = c.split(" | ").collect();
        ensure(groups.len() == 5 && groups[1] == "AP AR" && groups[2] == header && groups[3] == header, || {
            format!("unexpected column layout: {c}")
        })?;
    }
    for t in ["tau=0.2", "tau=0.4", "tau=0.6", "core=30", "core=100", "core=200"] {
        ensure(lines.iter().any(|l| l.starts_with(t)), || format!("no {t} row"))?;
    }

    let caps: Vec<usize> = report.capacity_rows.iter().filter_map(|r| r.core_capacity).collect();
    ensure(caps == [30, 100, 200], || format!("capacity rows {caps:?}"))?;
    ensure(report.capacity_rows.iter().all(|r| r.tau == 0.4), || "capacity rows not at tau 0.4".into())?;
    let base: Vec<f64> = report
        .capacity_rows
        .iter()
        .map(|r| r.accuracy_of(&report.base).ok_or("missing base accuracy"))
        .collect::<Result<_, _>>()?;
    ensure(base.windows(2).all(|w| w[1] > w[0]), || {
        format!("base retention not increasing with core size: {base:?}")
    })?;

    let golden: Value = serde_json::from_str(&read(&Path::new(GOLDEN).join("sweep_base_retention.json"))?).map_err(err)?;
    let want: Vec<f64> = golden["base_accuracy"]
        .as_array()
        .ok_or("golden file lacks base_accuracy")?
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    ensure(base == want, || format!("base retention {base:?}, golden {want:?}"))?;
    let golden_text = read(&Path::new(GOLDEN).join("sweep.txt"))?;
    ensure(text == golden_text, || "sweep table differs from the golden table".into())?;

    let pct: Vec<String> = base.iter().map(|b| format!("{:.1}", b * 100.0)).collect();
    Ok(format!("base accuracy at core 30/100/200: {}; table matches golden", pct.join(" < ")))
}
