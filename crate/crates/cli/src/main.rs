//! `corecurate` command-line interface.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corecurate::augment::{augment_dataset, AugmentationPlan};
use corecurate::eval::{compute_metrics, load_detections, GroundTruth};
use corecurate::learner::{FeatureDataset, FeatureSample, Learner, SoftmaxClassifier};
use corecurate::manifest::{canonical_string, load_manifest, save_manifest, write_atomic, Split};
use corecurate::partition::{mean_partition, parse_ratios, AssignmentFile};
use corecurate::pipeline::{self, LoopConfig, LoopState, RunLayout, RunOptions, ScorerSource, TaskSpec};
use corecurate::rng::{self, stream};
use corecurate::scoring::{
    corner_manifest, extract_corner_cases, read_embeddings, write_embeddings, Aggregation, CornerCaseSet,
    EmbeddingFormat, EmbeddingKind, ExtractionRule, Member,
};
use corecurate::synth::{self, SynthConfig};
use corecurate::uncertainty::{farthest_point_selection, score_candidates, select_uncertain, update_core, CoreDataset, CoreMember};
use corecurate::{Error, ErrorKind};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(
    name = "corecurate",
    version,
    about = "Corner-case dataset curation and replay-based continual learning"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Global {
    /// Loop config (JSON); relative paths inside resolve against its directory
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: logical CPUs)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Output directory (default: out)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Uncertainty threshold for core selection
    #[arg(long, global = true, value_name = "F")]
    tau: Option<f64>,
    /// Perturbed copies per candidate
    #[arg(long = "n-perturb", global = true, value_name = "N")]
    n_perturb: Option<usize>,
    /// Core dataset capacity
    #[arg(long = "core-capacity", global = true, value_name = "N")]
    core_capacity: Option<usize>,
    /// Train:val:test ratios
    #[arg(long, global = true, value_name = "A:B:C")]
    ratios: Option<String>,
    /// Embedding source
    #[arg(long, global = true, value_enum)]
    scorer: Option<ScorerArg>,
    /// Base URL of the embedding service
    #[arg(long = "scorer-url", global = true, value_name = "URL")]
    scorer_url: Option<String>,
    /// Image embeddings file (EMB1 or EMB1-JSON) for the file scorer
    #[arg(long, global = true, value_name = "PATH")]
    embeddings: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ScorerArg {
    File,
    Remote,
    Stub,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FormatArg {
    Binary,
    Json,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed the images of a manifest with the configured scorer
    Score {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Directory image paths are relative to (default: the manifest's)
        #[arg(long = "image-root", value_name = "DIR")]
        image_root: Option<PathBuf>,
        /// Also embed the prompts of this prompt file (stub scorer only)
        #[arg(long, value_name = "PATH")]
        prompts: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "binary")]
        format: FormatArg,
    },
    /// Extract the corner cases of a pool by prompt similarity
    Extract {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "PATH")]
        prompts: PathBuf,
        /// Text embeddings of the prompts (required unless the scorer is stub)
        #[arg(long = "prompt-embeddings", value_name = "PATH")]
        prompt_embeddings: Option<PathBuf>,
        #[arg(long = "image-root", value_name = "DIR")]
        image_root: Option<PathBuf>,
        #[arg(long, value_name = "F", conflicts_with = "top_k")]
        threshold: Option<f64>,
        #[arg(long = "top-k", value_name = "K")]
        top_k: Option<usize>,
        #[arg(long, value_enum)]
        aggregation: Option<AggregationArg>,
    },
    /// Split a corner-case set (or a manifest) into train/val/test
    Partition {
        /// Corner-case set or manifest
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Augment the train split of a manifest
    Augment {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long = "image-root", value_name = "DIR")]
        image_root: Option<PathBuf>,
        /// Assignment file to apply before augmenting
        #[arg(long, value_name = "PATH")]
        splits: Option<PathBuf>,
    },
    /// Score candidates by prediction consistency and update a core dataset
    SelectCore {
        #[arg(long, value_name = "PATH")]
        features: PathBuf,
        #[arg(long, value_name = "PATH")]
        params: PathBuf,
        /// Assignment file; candidates are its train and val samples
        #[arg(long, value_name = "PATH")]
        splits: PathBuf,
        /// Existing core dataset
        #[arg(long, value_name = "PATH")]
        core: Option<PathBuf>,
        #[arg(long, value_name = "T", default_value_t = 1)]
        iteration: u64,
    },
    /// Pick a spread-out initial core by farthest-point selection
    InitCore {
        /// Features to select from; without it the scorer's embeddings of --manifest are used
        #[arg(long, value_name = "PATH")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long = "image-root", value_name = "DIR")]
        image_root: Option<PathBuf>,
        /// Assignment file restricting candidates to train and val
        #[arg(long, value_name = "PATH")]
        splits: Option<PathBuf>,
        /// Core size (default: the capacity)
        #[arg(long, value_name = "K")]
        k: Option<usize>,
        /// Model used to score the picks (sigma is 0 without it)
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
    },
    /// Train the toy learner
    Train {
        #[arg(long, value_name = "PATH")]
        features: PathBuf,
        /// Assignment file; only its train split is used
        #[arg(long, value_name = "PATH")]
        splits: Option<PathBuf>,
        /// Starting parameters (default: zeros)
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        #[arg(long = "learning-rate", value_name = "F")]
        learning_rate: Option<f64>,
        #[arg(long = "batch-size", value_name = "N")]
        batch_size: Option<usize>,
        /// Keep the first half of the input rows fixed
        #[arg(long = "frozen-prefix")]
        frozen_prefix: bool,
    },
    /// Evaluate a model on a split, or score a detection file
    Eval {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "PATH")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        /// Assignment file selecting the evaluated samples
        #[arg(long, value_name = "PATH")]
        splits: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Detections to score against the manifest's annotations
        #[arg(long, value_name = "PATH", conflicts_with_all = ["features", "params"])]
        detections: Option<PathBuf>,
    },
    /// Run (or resume) the continual-learning loop
    RunLoop,
    /// Tables for a finished run, or a tau/core-size sweep
    Report {
        /// Comma-separated thresholds to sweep
        #[arg(long = "sweep-tau", value_name = "LIST", value_delimiter = ',')]
        sweep_tau: Vec<f64>,
        /// Comma-separated core capacities to sweep
        #[arg(long = "sweep-capacity", value_name = "LIST", value_delimiter = ',')]
        sweep_capacity: Vec<usize>,
    },
    /// Check manifests, embeddings, features, splits, cores and configs
    Validate {
        #[arg(required = true, value_name = "PATH")]
        paths: Vec<PathBuf>,
    },
    /// Write the seeded synthetic task stream and its loop config
    Synth {
        #[arg(long = "samples-per-task", value_name = "N")]
        samples_per_task: Option<usize>,
        /// Share of each corner pool drawn from the corner scenario
        #[arg(long = "corner-fraction", value_name = "F")]
        corner_fraction: Option<f64>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum AggregationArg {
    Max,
    Mean,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Settings after applying flags over the config file over defaults.
struct Settings {
    config: LoopConfig,
    source: BTreeMap<String, String>,
    has_file: bool,
    out: PathBuf,
}

fn settings(g: &Global) -> CliResult<Settings> {
    let (mut config, raw) = match &g.config {
        Some(p) => {
            let text = corecurate::manifest::read_to_string(p)?;
            let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                message: e.to_string(),
            })?;
            (LoopConfig::load(p)?, raw)
        }
        None => (LoopConfig::default(), json!({})),
    };
    let mut source = BTreeMap::new();
    let mut mark = |key: &str, flag: bool, path: &[&str]| {
        let in_file = path.iter().try_fold(&raw, |v, k| v.get(k)).is_some();
        let s = if flag {
            "flag"
        } else if in_file {
            "config"
        } else {
            "default"
        };
        source.insert(key.to_string(), s.to_string());
    };
    mark("seed", g.seed.is_some(), &["seed"]);
    mark("tau", g.tau.is_some(), &["tau"]);
    mark("n_perturb", g.n_perturb.is_some(), &["n_perturb"]);
    mark("core_capacity", g.core_capacity.is_some(), &["core_capacity"]);
    mark("ratios", g.ratios.is_some(), &["partition", "ratios"]);
    mark("scorer", g.scorer.is_some(), &["scorer", "source"]);
    mark("scorer_url", g.scorer_url.is_some(), &["scorer", "url"]);
    mark("embeddings", g.embeddings.is_some(), &["scorer", "embeddings"]);
    if let Some(s) = g.seed {
        config.seed = s;
    }
    if let Some(t) = g.tau {
        config.tau = t;
    }
    if let Some(n) = g.n_perturb {
        config.n_perturb = n;
    }
    if let Some(c) = g.core_capacity {
        config.core_capacity = Some(c);
    }
    if let Some(r) = &g.ratios {
        config.partition.ratios = parse_ratios(r).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(s) = g.scorer {
        config.scorer.source = match s {
            ScorerArg::File => ScorerSource::File,
            ScorerArg::Remote => ScorerSource::Remote,
            ScorerArg::Stub => ScorerSource::Stub,
        };
    }
    if let Some(u) = &g.scorer_url {
        config.scorer.url = Some(u.clone());
    }
    if let Some(e) = &g.embeddings {
        config.scorer.embeddings = Some(e.clone());
    }
    Ok(Settings {
        config,
        source,
        has_file: g.config.is_some(),
        out: g.out.clone().unwrap_or_else(|| PathBuf::from("out")),
    })
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, canonical_string(value)?.as_bytes())?;
    Ok(())
}

fn print_json(value: &Value) -> CliResult<()> {
    emit(canonical_string(value)?.trim_end())
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Core(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })),
        _ => Ok(()),
    }
}

fn root_for(explicit: &Option<PathBuf>, manifest: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn load_feature_map(path: &Path) -> CliResult<(FeatureDataset, BTreeMap<u64, FeatureSample<f64>>)> {
    let d = FeatureDataset::load(path)?;
    let map = d.samples.iter().map(|s| (s.sample_id, s.clone())).collect();
    Ok((d, map))
}

fn ids_in(assignment: &BTreeMap<u64, Split>, splits: &[Split]) -> BTreeSet<u64> {
    assignment
        .iter()
        .filter(|(_, s)| splits.contains(s))
        .map(|(id, _)| *id)
        .collect()
}

fn load_splits(path: &Path) -> CliResult<BTreeMap<u64, Split>> {
    Ok(AssignmentFile::load(path)?.assignment()?)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return usage("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure::Core(Error::Invariant(e.to_string())))?;
    }
    let s = settings(&cli.global)?;
    let cfg = &s.config;
    let out = &s.out;
    match cli.command {
        Command::Score {
            manifest,
            image_root,
            prompts,
            format,
        } => {
            let m = load_manifest(&manifest)?;
            let root = root_for(&image_root, &manifest);
            let table = pipeline::image_embeddings(cfg, &m, &root)?;
            let mut kept = corecurate::scoring::EmbeddingTable::<f32>::new(table.dim(), EmbeddingKind::Image)?;
            for id in m.sample_ids() {
                let v = table.get(id).ok_or(Error::MissingEmbedding(id))?;
                kept.insert(id, v.iter().map(|&x| x as f32).collect())?;
            }
            let (fmt, ext) = match format {
                FormatArg::Binary => (EmbeddingFormat::Binary, "emb1"),
                FormatArg::Json => (EmbeddingFormat::Json, "json"),
            };
            ensure_dir(out)?;
            let path = out.join(format!("embeddings.{ext}"));
            write_embeddings(&kept, &path, fmt)?;
            let mut summary = json!({"embeddings": path, "count": kept.len(), "dim": kept.dim()});
            if let Some(p) = prompts {
                if cfg.scorer.source != ScorerSource::Stub {
                    return usage("--prompts needs the stub scorer; other scorers take precomputed prompt embeddings");
                }
                let spec = TaskSpec {
                    name: "prompts".into(),
                    pool: manifest.clone(),
                    features: manifest.clone(),
                    prompts: p,
                    prompt_embeddings: None,
                    image_root: None,
                };
                let set = pipeline::prompt_set(cfg, &spec)?;
                let text = set.prompt_embeddings.cast::<f32>();
                let ppath = out.join(format!("prompts.{ext}"));
                write_embeddings(&text, &ppath, fmt)?;
                summary["prompt_embeddings"] = json!(ppath);
            }
            print_json(&summary)
        }
        Command::Extract {
            manifest,
            prompts,
            prompt_embeddings,
            image_root,
            threshold,
            top_k,
            aggregation,
        } => {
            if prompt_embeddings.is_none() && cfg.scorer.source != ScorerSource::Stub {
                return usage("--prompt-embeddings is required unless the scorer is stub");
            }
            let m = load_manifest(&manifest)?;
            let root = root_for(&image_root, &manifest);
            let emb = pipeline::image_embeddings(cfg, &m, &root)?;
            let spec = TaskSpec {
                name: "extract".into(),
                pool: manifest.clone(),
                features: manifest.clone(),
                prompts,
                prompt_embeddings,
                image_root: None,
            };
            let set = pipeline::prompt_set(cfg, &spec)?;
            let rule = match (threshold, top_k) {
                (_, Some(k)) => ExtractionRule::TopK(k),
                (Some(t), None) => ExtractionRule::Threshold(t),
                (None, None) => cfg.extraction.rule()?,
            };
            let agg = match aggregation {
                Some(AggregationArg::Max) => Aggregation::Max,
                Some(AggregationArg::Mean) => Aggregation::Mean,
                None => cfg.extraction.aggregation,
            };
            let corner = extract_corner_cases(&m, &emb, &set, rule, agg, manifest.display().to_string())?;
            ensure_dir(out)?;
            write_json(&out.join("corner_set.json"), &corner)?;
            save_manifest(&corner_manifest(&m, &corner), &out.join("corner_manifest.json"))?;
            if corner.is_empty() {
                log::warn!("no corner cases matched");
            }
            print_json(&json!({
                "corner_set": out.join("corner_set.json"),
                "corner_manifest": out.join("corner_manifest.json"),
                "count": corner.len(),
            }))
        }
        Command::Partition { input } => {
            let text = corecurate::manifest::read_to_string(&input)?;
            let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: input.clone(),
                message: e.to_string(),
            })?;
            let set: CornerCaseSet = if raw.get("members").is_some() {
                serde_json::from_value(raw).map_err(|e| Error::Parse {
                    path: input.clone(),
                    message: e.to_string(),
                })?
            } else {
                let m = load_manifest(&input)?;
                CornerCaseSet {
                    scenario_name: m.meta.get("task").cloned().unwrap_or_else(|| "manifest".into()),
                    members: m
                        .samples
                        .iter()
                        .map(|s| Member {
                            sample_id: s.id,
                            confidence: s.confidence.unwrap_or(1.0),
                        })
                        .collect(),
                    source_manifest: input.display().to_string(),
                }
            };
            set.validate()?;
            let policy = corecurate::partition::PartitionPolicy {
                seed: cfg.seed,
                ..cfg.partition
            };
            let assignment = mean_partition(&set, &policy)?;
            ensure_dir(out)?;
            let path = out.join("splits.json");
            AssignmentFile::new(&set.scenario_name, &policy, &assignment).save(&path)?;
            let sizes = [Split::Train, Split::Val, Split::Test].map(|sp| ids_in(&assignment, &[sp]).len());
            print_json(&json!({"splits": path, "train": sizes[0], "val": sizes[1], "test": sizes[2]}))
        }
        Command::Augment {
            manifest,
            image_root,
            splits,
        } => {
            let mut m = load_manifest(&manifest)?;
            if let Some(p) = splits {
                m.apply_splits(&load_splits(&p)?);
            }
            let root = root_for(&image_root, &manifest);
            let plan = AugmentationPlan::new(cfg.augment, rng::key(cfg.seed, &[stream::AUGMENT]));
            ensure_dir(out)?;
            let res = augment_dataset(&m, &plan, &root, Some(out))?;
            let path = out.join("augmented_manifest.json");
            save_manifest(&res.manifest, &path)?;
            write_json(&out.join("provenance.json"), &res.provenance)?;
            print_json(&json!({
                "manifest": path,
                "variants": res.provenance.len(),
                "boxes_total": res.boxes_total,
                "boxes_dropped": res.boxes_dropped,
            }))
        }
        Command::SelectCore {
            features,
            params,
            splits,
            core,
            iteration,
        } => {
            let (_, fmap) = load_feature_map(&features)?;
            let model = SoftmaxClassifier::<f64>::load(&params)?;
            let candidates: Vec<u64> = ids_in(&load_splits(&splits)?, &[Split::Train, Split::Val]).into_iter().collect();
            let current = match core {
                Some(p) => CoreDataset::load(&p)?,
                None => CoreDataset::new(cfg.core_capacity),
            };
            let labeler = |id: u64, i: usize, n: usize, seed: u64| -> corecurate::Result<u64> {
                let f = fmap.get(&id).ok_or(Error::InvalidRecord {
                    id,
                    message: "no features for sample".into(),
                })?;
                model.predict_label(&cfg.perturbation.apply(&f.features, seed, id, i, n)?)
            };
            let seed = rng::key(cfg.seed, &[iteration, stream::PERTURB]);
            let selected = select_uncertain(&candidates, &labeler, cfg.tau, cfg.n_perturb, seed)?;
            let updated = update_core(&current, &selected, iteration);
            ensure_dir(out)?;
            write_json(&out.join("selection.json"), &selected)?;
            updated.save(&out.join("core.json"))?;
            print_json(&json!({
                "core": out.join("core.json"),
                "candidates": candidates.len(),
                "selected": selected.len(),
                "core_size": updated.len(),
            }))
        }
        Command::InitCore {
            features,
            manifest,
            image_root,
            splits,
            k,
            params,
        } => {
            let allowed = match &splits {
                Some(p) => Some(ids_in(&load_splits(p)?, &[Split::Train, Split::Val])),
                None => None,
            };
            let keep = |id: &u64| allowed.as_ref().is_none_or(|a| a.contains(id));
            let fmap = match &features {
                Some(p) => Some(load_feature_map(p)?.1),
                None => None,
            };
            let picks = match (&fmap, &manifest) {
                (Some(f), _) => {
                    let points: Vec<(u64, &[f64])> = f
                        .iter()
                        .filter(|(id, _)| keep(id))
                        .map(|(id, s)| (*id, s.features.as_slice()))
                        .collect();
                    let k = k.or(cfg.core_capacity).unwrap_or(points.len()).min(points.len());
                    farthest_point_selection(&points, k)?
                }
                (None, Some(mp)) => {
                    let m = load_manifest(mp)?;
                    let emb = pipeline::image_embeddings(cfg, &m, &root_for(&image_root, mp))?;
                    let points: Vec<(u64, &[f64])> = m
                        .sample_ids()
                        .into_iter()
                        .filter(keep)
                        .map(|id| Ok((id, emb.get(id).ok_or(Error::MissingEmbedding(id))?)))
                        .collect::<corecurate::Result<_>>()?;
                    let k = k.or(cfg.core_capacity).unwrap_or(points.len()).min(points.len());
                    farthest_point_selection(&points, k)?
                }
                (None, None) => return usage("init-core needs --features or --manifest"),
            };
            let sigmas: BTreeMap<u64, f64> = match (&params, &fmap) {
                (Some(p), Some(f)) => {
                    let model = SoftmaxClassifier::<f64>::load(p)?;
                    let labeler = |id: u64, i: usize, n: usize, seed: u64| -> corecurate::Result<u64> {
                        let s = f.get(&id).ok_or(Error::InvalidRecord {
                            id,
                            message: "no features for sample".into(),
                        })?;
                        model.predict_label(&cfg.perturbation.apply(&s.features, seed, id, i, n)?)
                    };
                    let seed = rng::key(cfg.seed, &[0, stream::PERTURB]);
                    score_candidates(&picks, &labeler, cfg.n_perturb, seed)?
                        .into_iter()
                        .map(|s| (s.sample_id, s.sigma))
                        .collect()
                }
                (Some(_), None) => return usage("--params needs --features"),
                _ => BTreeMap::new(),
            };
            let mut core = CoreDataset::new(cfg.core_capacity);
            core.members = picks
                .iter()
                .map(|&id| CoreMember {
                    sample_id: id,
                    sigma: sigmas.get(&id).copied().unwrap_or(0.0),
                    added_at: 0,
                })
                .collect();
            core.canonicalize();
            core.validate()?;
            ensure_dir(out)?;
            core.save(&out.join("core.json"))?;
            print_json(&json!({"core": out.join("core.json"), "core_size": core.len()}))
        }
        Command::Train {
            features,
            splits,
            params,
            epochs,
            learning_rate,
            batch_size,
            frozen_prefix,
        } => {
            let (d, fmap) = load_feature_map(&features)?;
            let ids: BTreeSet<u64> = match &splits {
                Some(p) => ids_in(&load_splits(p)?, &[Split::Train]),
                None => fmap.keys().copied().collect(),
            };
            let data: Vec<FeatureSample<f64>> = ids
                .iter()
                .map(|id| {
                    fmap.get(id).cloned().ok_or(Error::InvalidRecord {
                        id: *id,
                        message: "no features for sample".into(),
                    })
                })
                .collect::<corecurate::Result<_>>()?;
            let init = match &params {
                Some(p) => SoftmaxClassifier::<f64>::load(p)?,
                None => SoftmaxClassifier::zeros(d.dim, d.classes)?,
            };
            let mut tc = cfg.train;
            tc.seed = rng::key(cfg.seed, &[stream::TRAIN_SHUFFLE]);
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(l) = learning_rate {
                tc.learning_rate = l;
            }
            if let Some(b) = batch_size {
                tc.batch_size = b;
            }
            tc.frozen_prefix |= frozen_prefix;
            let (model, report) = init.train(&data, &tc)?;
            ensure_dir(out)?;
            model.save(&out.join("params.bin"))?;
            write_json(&out.join("train_report.json"), &report)?;
            print_json(&json!({
                "params": out.join("params.bin"),
                "samples": data.len(),
                "final_loss": report.epoch_losses.last(),
                "accuracy": model.evaluate(&data)?,
            }))
        }
        Command::Eval {
            manifest,
            features,
            params,
            splits,
            split,
            detections,
        } => {
            let m = load_manifest(&manifest)?;
            let ids: BTreeSet<u64> = match &splits {
                Some(p) => ids_in(&load_splits(p)?, &[split.into()]),
                None => m.sample_ids().into_iter().collect(),
            };
            let value = match (detections, features, params) {
                (Some(dp), _, _) => {
                    let dets: Vec<_> = load_detections(&dp)?
                        .into_iter()
                        .filter(|d| ids.contains(&d.sample_id))
                        .collect();
                    let gts: Vec<GroundTruth> = m
                        .annotations
                        .iter()
                        .filter(|a| ids.contains(&a.sample_id))
                        .map(GroundTruth::from)
                        .collect();
                    let cats: Vec<u64> = m.categories.iter().map(|c| c.id).collect();
                    serde_json::to_value(compute_metrics(&dets, &gts, &cats)?).map_err(|e| Error::Invariant(e.to_string()))?
                }
                (None, Some(fp), Some(pp)) => {
                    let (_, fmap) = load_feature_map(&fp)?;
                    let model = SoftmaxClassifier::<f64>::load(&pp)?;
                    serde_json::to_value(pipeline::evaluate_split(&model, &m, &fmap, &ids)?)
                        .map_err(|e| Error::Invariant(e.to_string()))?
                }
                _ => return usage("eval needs --detections, or --features with --params"),
            };
            ensure_dir(out)?;
            write_json(&out.join("metrics.json"), &value)?;
            print_json(&value)
        }
        Command::RunLoop => {
            if !s.has_file {
                return usage("run-loop needs --config");
            }
            let opts = RunOptions {
                stop_after: None,
                settings_source: s.source.clone(),
            };
            let outcome = pipeline::run_stream(cfg, out, &opts)?;
            let last = outcome.state.history.last().map(|r| r.status.clone());
            print_json(&json!({
                "run": outcome.layout.dir,
                "iterations": outcome.state.t,
                "last_status": last,
                "core_size": outcome.state.core.len(),
                "final": outcome.state.final_evaluations(),
            }))
        }
        Command::Report {
            sweep_tau,
            sweep_capacity,
        } => {
            if !s.has_file {
                return usage("report needs --config");
            }
            if !sweep_tau.is_empty() || !sweep_capacity.is_empty() {
                let taus = if sweep_tau.is_empty() { vec![cfg.tau] } else { sweep_tau };
                let caps = if sweep_capacity.is_empty() {
                    cfg.core_capacity.into_iter().collect()
                } else {
                    sweep_capacity
                };
                let report = pipeline::run_sweep(cfg, out, &taus, &caps)?;
                write_json(&out.join("sweep.json"), &report)?;
                write_atomic(&out.join("sweep.txt"), report.to_text().as_bytes())?;
                print_json(&serde_json::to_value(&report).map_err(|e| Error::Invariant(e.to_string()))?)
            } else {
                let layout = RunLayout::new(out, &cfg.name);
                let state = LoopState::load(&layout.state())?;
                let accuracy = corecurate::eval::forgetting_report(&state.accuracy_history())?;
                let ap = corecurate::eval::forgetting_report(&state.ap_history())?;
                let mut text = state.to_table()?;
                text.push('\n');
                text.push_str(&accuracy.to_table());
                let value = json!({
                    "history": state.history,
                    "forgetting": {"accuracy": accuracy, "ap": ap},
                });
                let body = serde_json::to_string_pretty(&value).map_err(|e| Error::Invariant(e.to_string()))?;
                write_atomic(&layout.dir.join("report.json"), body.as_bytes())?;
                write_atomic(&layout.dir.join("report.txt"), text.as_bytes())?;
                emit(&body)
            }
        }
        Command::Validate { paths } => {
            let mut results = Vec::new();
            for p in &paths {
                let kind = validate_path(p)?;
                results.push(json!({"path": p, "kind": kind, "ok": true}));
            }
            print_json(&Value::Array(results))
        }
        Command::Synth {
            samples_per_task,
            corner_fraction,
        } => {
            let mut sc = SynthConfig::default();
            if let Some(seed) = cli.global.seed {
                sc.seed = seed;
            }
            if let Some(n) = samples_per_task {
                sc.samples_per_task = n;
            }
            if let Some(f) = corner_fraction {
                sc.corner_fraction = f;
            }
            let mut template = if s.has_file { cfg.clone() } else { synth::default_loop_config() };
            if let Some(t) = cli.global.tau {
                template.tau = t;
            }
            if let Some(n) = cli.global.n_perturb {
                template.n_perturb = n;
            }
            if let Some(c) = cli.global.core_capacity {
                template.core_capacity = Some(c);
            }
            if cli.global.ratios.is_some() {
                template.partition.ratios = cfg.partition.ratios;
            }
            let stream = synth::generate(&sc)?;
            ensure_dir(out)?;
            let layout = synth::write_stream(&stream, out, &template)?;
            print_json(&json!({"config": out.join(&layout.config), "embeddings": out.join(&layout.embeddings)}))
        }
    }
}

/// Validates one file, guessing its kind from its content.
fn validate_path(path: &Path) -> CliResult<&'static str> {
    let bytes = std::fs::read(path).map_err(|e| {
        Failure::Core(if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        })
    })?;
    if bytes.starts_with(b"EMB1") {
        read_embeddings::<f32>(path, EmbeddingKind::Image)?;
        return Ok("embeddings");
    }
    let parse_err = |e: String| Failure::Core(Error::Parse {
        path: path.to_path_buf(),
        message: e,
    });
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        SoftmaxClassifier::<f64>::restore(&bytes)?;
        return Ok("params");
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(e.to_string()))?;
    let v: Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let has = |k: &str| v.get(k).is_some();
    if v.is_array() {
        load_detections(path)?;
        Ok("detections")
    } else if has("entries") && has("format") {
        read_embeddings::<f32>(path, EmbeddingKind::Image)?;
        Ok("embeddings")
    } else if has("samples") && has("schema_version") {
        load_manifest(path)?;
        Ok("manifest")
    } else if has("samples") && has("classes") {
        FeatureDataset::load(path)?;
        Ok("features")
    } else if has("assignment") {
        AssignmentFile::load(path)?.assignment()?;
        Ok("splits")
    } else if has("members") && has("scenario_name") {
        let set: CornerCaseSet = serde_json::from_value(v).map_err(|e| parse_err(e.to_string()))?;
        set.validate()?;
        Ok("corner_set")
    } else if has("members") {
        CoreDataset::load(path)?;
        Ok("core")
    } else if has("history") && has("params") {
        LoopState::load(path)?;
        Ok("state")
    } else if has("tasks") || has("base") {
        LoopConfig::load(path)?.validate()?;
        Ok("config")
    } else {
        Err(parse_err("unrecognised file".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            let _ = e.print();
            return match e.kind() {
                K::DisplayHelp | K::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORECURATE_LOG", "warn"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Data => ExitCode::from(2),
                ErrorKind::Runtime => ExitCode::from(3),
            }
        }
    }
}
