//! Seeded synthetic task stream for exercising the continual loop at desk
//! scale.
//!
//! Every task brings classes of its own (the base task holds whatever the
//! corner tasks leave over), all in one feature space as a Gaussian mixture. New class
//! prototypes lean toward those of the preceding task by `similarity`, so a model trained on a
//! new task alone stops predicting the classes earlier tasks relied on.
//!
//! Image embeddings are written alongside: corner samples of task `t` lean
//! toward that task's scenario direction, distractors are isotropic.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::save_png;
use crate::error::{Error, Result};
use crate::learner::{FeatureDataset, FeatureSample, TrainConfig};
use crate::pipeline::{BaseSpec, ExtractionConfig, LoopConfig, ScorerConfig, ScorerSource, TaskSpec};
use crate::uncertainty::FeaturePerturbation;
use crate::manifest::{canonical_string, save_manifest, write_atomic, Annotation, Category, DatasetManifest, Sample};
use crate::rng::{self, stream};
use crate::scoring::{write_embeddings, EmbeddingFormat};
use crate::scoring::{normalize, EmbeddingKind, EmbeddingTable, PromptFile};

/// Ids of task `t` start at `t * ID_STRIDE + 1`; the base task is `t = 0`.
pub const ID_STRIDE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    /// Classes introduced by each corner task.
    pub new_classes: usize,
    pub dim: usize,
    /// Corner tasks after the base task.
    pub tasks: usize,
    /// Pool size of every task; the base task is all routine samples.
    pub samples_per_task: usize,
    /// Share of each corner pool that belongs to the corner scenario; the
    /// rest are routine distractors.
    pub corner_fraction: f64,
    pub signal: f64,
    /// Pull of a new class prototype toward a prototype of an earlier task.
    pub similarity: f64,
    pub noise: f64,
    pub image_size: u32,
    pub embed_dim: usize,
    /// Weight of the scenario direction in corner-sample embeddings.
    pub alignment: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            classes: 8,
            new_classes: 2,
            dim: 16,
            tasks: 2,
            samples_per_task: 2000,
            corner_fraction: 0.4,
            signal: 3.0,
            similarity: 0.15,
            noise: 1.0,
            image_size: 16,
            embed_dim: 32,
            alignment: 0.9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.new_classes < 1 || self.classes <= self.tasks * self.new_classes || self.dim < 2 {
            return bad("need base classes, new classes per task and at least two dimensions".into());
        }
        if !(0.0..=1.0).contains(&self.corner_fraction) {
            return bad(format!("corner_fraction {} outside [0, 1]", self.corner_fraction));
        }
        if self.corner_count() < self.classes {
            return bad("fewer samples than classes".into());
        }
        if self.image_size < 2 || self.embed_dim < 2 {
            return bad("image size and embedding dim must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.alignment) {
            return bad(format!("alignment {} outside [0, 1]", self.alignment));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return bad(format!("similarity {} outside [0, 1]", self.similarity));
        }
        for (name, v) in [("signal", self.signal), ("noise", self.noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Corner samples in each corner pool.
    pub fn corner_count(&self) -> usize {
        (self.samples_per_task as f64 * self.corner_fraction).round() as usize
    }

    /// Class ids owned by task `t` (the base task is 0).
    pub fn task_classes(&self, t: usize) -> std::ops::Range<usize> {
        let base = self.classes - self.tasks * self.new_classes;
        if t == 0 {
            0..base
        } else {
            let lo = base + (t - 1) * self.new_classes;
            lo..lo + self.new_classes
        }
    }
}

/// One generated task: manifest plus features (and, for corner tasks,
/// prompts and prompt embeddings).
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub name: String,
    pub manifest: DatasetManifest,
    pub features: FeatureDataset,
    pub prompts: Option<PromptFile>,
    pub prompt_embeddings: Option<EmbeddingTable<f32>>,
}

#[derive(Debug, Clone)]
pub struct SynthStream {
    pub config: SynthConfig,
    pub base: SynthTask,
    pub tasks: Vec<SynthTask>,
    pub embeddings: EmbeddingTable<f32>,
}

fn unit(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v).is_ok() {
            return v;
        }
    }
}

pub fn task_name(t: usize) -> String {
    if t == 0 {
        "base".into()
    } else {
        format!("task{t}")
    }
}

fn categories(k: usize) -> Vec<Category> {
    (0..k as u64)
        .map(|id| Category {
            id,
            name: format!("class_{id}"),
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthStream> {
    cfg.validate()?;
    let blocks = cfg.tasks + 1;
    let mut proto_rng = rng::rng_for(cfg.seed, &[stream::SYNTH, 0]);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for t in 0..blocks {
        for _ in cfg.task_classes(t) {
            let mut p = unit(&mut proto_rng, cfg.dim);
            if t > 0 {
                let old = &prototypes[proto_rng.random_range(cfg.task_classes(t - 1))];
                p = old
                    .iter()
                    .zip(&p)
                    .map(|(o, r)| cfg.similarity * o + (1.0 - cfg.similarity) * r)
                    .collect();
                normalize(&mut p)?;
            }
            prototypes.push(p);
        }
    }
    let scenario_dirs: Vec<Vec<f64>> = (0..blocks).map(|_| unit(&mut proto_rng, cfg.embed_dim)).collect();

    let mut embeddings = EmbeddingTable::new(cfg.embed_dim, EmbeddingKind::Image)?;
    let mut all = Vec::with_capacity(blocks);
    for t in 0..blocks {
        let mut rng = rng::rng_for(cfg.seed, &[stream::SYNTH, 1, t as u64]);
        let n_corner = if t == 0 { cfg.samples_per_task } else { cfg.corner_count() };
        let n_distract = cfg.samples_per_task - n_corner;
        let mut manifest = DatasetManifest::new(categories(cfg.classes));
        manifest.meta.insert("source".into(), "synthetic".into());
        manifest.meta.insert("seed".into(), cfg.seed.to_string());
        manifest.meta.insert("task".into(), task_name(t));
        let mut samples = Vec::with_capacity(n_corner + n_distract);
        for i in 0..n_corner + n_distract {
            let id = t as u64 * ID_STRIDE + i as u64 + 1;
            let distractor = i >= n_corner;
            // Distractors look like base-task scenes.
            let home = if distractor { 0 } else { t };
            let own = cfg.task_classes(home);
            let label = own.start + i % own.len();
            let x: Vec<f64> = prototypes[label]
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cfg.signal * p + cfg.noise * z
                })
                .collect();
            let noise_dir = unit(&mut rng, cfg.embed_dim);
            let emb: Vec<f64> = if distractor || t == 0 {
                noise_dir
            } else {
                let rest = (1.0 - cfg.alignment * cfg.alignment).sqrt();
                let mut v: Vec<f64> = scenario_dirs[t]
                    .iter()
                    .zip(&noise_dir)
                    .map(|(s, r)| cfg.alignment * s + rest * r)
                    .collect();
                normalize(&mut v)?;
                v
            };
            samples.push((id, label as u64, distractor, x, emb));
        }
        let mut features = FeatureDataset {
            dim: cfg.dim,
            classes: cfg.classes,
            samples: Vec::with_capacity(samples.len()),
        };
        for (id, label, distractor, x, emb) in samples {
            let mut s = Sample::new(id, format!("images/{id}.png"), cfg.image_size, cfg.image_size);
            if distractor {
                s.tags.insert("distractor".into());
            }
            manifest.samples.push(s);
            manifest.annotations.push(Annotation {
                id,
                sample_id: id,
                category_id: label,
                bbox: [0.0, 0.0, f64::from(cfg.image_size), f64::from(cfg.image_size)],
                score: None,
            });
            embeddings.insert_normalized(id, emb.iter().map(|&v| v as f32).collect())?;
            features.samples.push(FeatureSample {
                sample_id: id,
                features: x,
                label,
            });
        }
        let (prompts, prompt_embeddings) = if t == 0 {
            (None, None)
        } else {
            let name = task_name(t);
            let prompts = PromptFile {
                scenario: name.clone(),
                prompts: vec![
                    format!("a photo of a road scene in {name} conditions"),
                    format!("{name} scenario"),
                ],
            };
            let mut table = EmbeddingTable::new(cfg.embed_dim, EmbeddingKind::Text)?;
            let mut prng = rng::rng_for(cfg.seed, &[stream::SYNTH, 2, t as u64]);
            for p in 0..prompts.prompts.len() {
                let jitter = unit(&mut prng, cfg.embed_dim);
                let w = 0.1 * p as f64;
                let v: Vec<f32> = scenario_dirs[t]
                    .iter()
                    .zip(&jitter)
                    .map(|(s, r)| ((1.0 - w) * s + w * r) as f32)
                    .collect();
                table.insert_normalized(p as u64, v)?;
            }
            (Some(prompts), Some(table))
        };
        manifest.canonicalize();
        manifest.validate()?;
        features.validate()?;
        all.push(SynthTask {
            name: task_name(t),
            manifest,
            features,
            prompts,
            prompt_embeddings,
        });
    }
    let base = all.remove(0);
    Ok(SynthStream {
        config: cfg.clone(),
        base,
        tasks: all,
        embeddings,
    })
}

/// A small picture whose colours follow the sample's features.
pub fn render(features: &[f64], size: u32) -> RgbImage {
    let n = features.len();
    RgbImage::from_fn(size, size, |x, y| {
        let px = |c: usize| {
            let f = features[(x as usize + 2 * y as usize + 5 * c) % n];
            (128.0 + 40.0 * f).round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Paths written by [`write_stream`], relative to the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct StreamLayout {
    pub config: PathBuf,
    pub embeddings: PathBuf,
}

/// Loop settings the synthetic stream is meant to be run with.
pub fn default_loop_config() -> LoopConfig {
    LoopConfig {
        name: "two_task".into(),
        seed: 7,
        core_capacity: Some(100),
        train: TrainConfig {
            epochs: 30,
            learning_rate: 0.1,
            ..TrainConfig::default()
        },
        perturbation: FeaturePerturbation {
            noise_std: 1.5,
            ..FeaturePerturbation::default()
        },
        feature_jitter: 0.3,
        extraction: ExtractionConfig {
            threshold: Some(0.8),
            ..ExtractionConfig::default()
        },
        ..LoopConfig::default()
    }
}

/// `template` with base, tasks and scorer pointing at the files written by
/// [`write_stream`] (paths relative to the stream directory).
pub fn stream_config(stream: &SynthStream, template: &LoopConfig) -> LoopConfig {
    let file = |name: &str, suffix: &str| PathBuf::from(format!("{name}_{suffix}"));
    LoopConfig {
        scorer: ScorerConfig {
            source: ScorerSource::File,
            embeddings: Some("embeddings.emb1".into()),
            ..template.scorer.clone()
        },
        base: Some(BaseSpec {
            name: stream.base.name.clone(),
            manifest: file(&stream.base.name, "manifest.json"),
            features: file(&stream.base.name, "features.json"),
            image_root: None,
        }),
        tasks: stream
            .tasks
            .iter()
            .map(|t| TaskSpec {
                name: t.name.clone(),
                pool: file(&t.name, "manifest.json"),
                features: file(&t.name, "features.json"),
                prompts: file(&t.name, "prompts.json"),
                prompt_embeddings: Some(file(&t.name, "prompts.emb1")),
                image_root: None,
            })
            .collect(),
        ..template.clone()
    }
}

/// Writes images, manifests, feature files, prompts, embeddings and the
/// loop config `<template.name>.json` (built from `template`) under `out`.
pub fn write_stream(stream: &SynthStream, out: &Path, template: &LoopConfig) -> Result<StreamLayout> {
    std::fs::create_dir_all(out.join("images")).map_err(|e| Error::io(out, e))?;
    let mut jobs: Vec<(u64, &[f64])> = Vec::new();
    for task in std::iter::once(&stream.base).chain(&stream.tasks) {
        for s in &task.features.samples {
            jobs.push((s.sample_id, &s.features));
        }
    }
    let size = stream.config.image_size;
    jobs.par_iter()
        .try_for_each(|(id, f)| save_png(&render(f, size), &out.join(format!("images/{id}.png"))))?;
    for task in std::iter::once(&stream.base).chain(&stream.tasks) {
        save_manifest(&task.manifest, &out.join(format!("{}_manifest.json", task.name)))?;
        task.features.save(&out.join(format!("{}_features.json", task.name)))?;
        if let Some(p) = &task.prompts {
            write_atomic(
                &out.join(format!("{}_prompts.json", task.name)),
                canonical_string(p)?.as_bytes(),
            )?;
        }
        if let Some(t) = &task.prompt_embeddings {
            write_embeddings(
                t,
                &out.join(format!("{}_prompts.emb1", task.name)),
                EmbeddingFormat::Binary,
            )?;
        }
    }
    write_embeddings(&stream.embeddings, &out.join("embeddings.emb1"), EmbeddingFormat::Binary)?;
    write_atomic(
        &out.join("synth.json"),
        canonical_string(&stream.config)?.as_bytes(),
    )?;
    let config = PathBuf::from(format!("{}.json", template.name));
    write_atomic(&out.join(&config), canonical_string(&stream_config(stream, template))?.as_bytes())?;
    Ok(StreamLayout {
        config,
        embeddings: PathBuf::from("embeddings.emb1"),
    })
}
