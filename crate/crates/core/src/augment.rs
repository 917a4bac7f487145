//! Deterministic, annotation-consistent image augmentation.
//!
//! Geometric ops (flip, quarter-turn rotation, scale) move the pixels and the
//! boxes together; photometric ops (brightness, blur) leave boxes alone.
//! Every op list is a pure function of `(seed, sample_id, variant)`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Annotation, BBox, DatasetManifest, Sample, Split};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Rotation {
    Quarter,
    Half,
    ThreeQuarter,
}

impl Rotation {
    pub fn degrees(self) -> u32 {
        match self {
            Rotation::Quarter => 90,
            Rotation::Half => 180,
            Rotation::ThreeQuarter => 270,
        }
    }

    pub fn inverse(self) -> Rotation {
        match self {
            Rotation::Quarter => Rotation::ThreeQuarter,
            Rotation::Half => Rotation::Half,
            Rotation::ThreeQuarter => Rotation::Quarter,
        }
    }
}

impl TryFrom<u32> for Rotation {
    type Error = String;

    fn try_from(deg: u32) -> std::result::Result<Self, String> {
        match deg {
            90 => Ok(Rotation::Quarter),
            180 => Ok(Rotation::Half),
            270 => Ok(Rotation::ThreeQuarter),
            other => Err(format!("rotation must be 90, 180 or 270 degrees, got {other}")),
        }
    }
}

impl From<Rotation> for u32 {
    fn from(r: Rotation) -> u32 {
        r.degrees()
    }
}

/// One transform. Rotations are clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Hflip,
    Rotate { angle: Rotation },
    Scale { factor: f64 },
    Brightness { delta: f64 },
    GaussianBlur { sigma: f64 },
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentOp::Hflip => write!(f, "hflip"),
            AugmentOp::Rotate { angle } => write!(f, "rotate({})", angle.degrees()),
            AugmentOp::Scale { factor } => write!(f, "scale({factor})"),
            AugmentOp::Brightness { delta } => write!(f, "brightness({delta})"),
            AugmentOp::GaussianBlur { sigma } => write!(f, "gaussian_blur({sigma})"),
        }
    }
}

impl AugmentOp {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            AugmentOp::Hflip | AugmentOp::Rotate { .. } | AugmentOp::Scale { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match *self {
            AugmentOp::Scale { factor } if !(0.5..=2.0).contains(&factor) => {
                bad(format!("scale factor {factor} outside [0.5, 2.0]"))
            }
            AugmentOp::Brightness { delta } if !(-0.5..=0.5).contains(&delta) => {
                bad(format!("brightness delta {delta} outside [-0.5, 0.5]"))
            }
            AugmentOp::GaussianBlur { sigma } if !(sigma > 0.0 && sigma <= 5.0) => {
                bad(format!("blur sigma {sigma} outside (0, 5]"))
            }
            _ => Ok(()),
        }
    }

    /// Image dimensions after the op.
    pub fn output_dims(&self, (w, h): (u32, u32)) -> (u32, u32) {
        match *self {
            AugmentOp::Rotate {
                angle: Rotation::Quarter | Rotation::ThreeQuarter,
            } => (h, w),
            AugmentOp::Scale { factor } => (scaled_dim(w, factor), scaled_dim(h, factor)),
            _ => (w, h),
        }
    }
}

fn scaled_dim(d: u32, factor: f64) -> u32 {
    ((f64::from(d) * factor).round() as u32).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoxOutcome {
    Kept(BBox),
    /// Clipped to nothing (`w <= 0` or `h <= 0`).
    Dropped,
}

impl BoxOutcome {
    pub fn kept(self) -> Option<BBox> {
        match self {
            BoxOutcome::Kept(b) => Some(b),
            BoxOutcome::Dropped => None,
        }
    }
}

/// Axis-aligned image of a box under a geometric op, clipped to the new
/// image bounds.
pub fn transform_bbox(bbox: BBox, op: &AugmentOp, dims: (u32, u32)) -> Result<BoxOutcome> {
    let [x, y, w, h] = bbox;
    let (wf, hf) = (f64::from(dims.0), f64::from(dims.1));
    let out = match *op {
        AugmentOp::Hflip => [wf - x - w, y, w, h],
        AugmentOp::Rotate { angle } => match angle {
            Rotation::Quarter => [hf - y - h, x, h, w],
            Rotation::Half => [wf - x - w, hf - y - h, w, h],
            Rotation::ThreeQuarter => [y, wf - x - w, h, w],
        },
        AugmentOp::Scale { factor } => [x * factor, y * factor, w * factor, h * factor],
        _ => {
            return Err(Error::NotGeometric {
                op: op.to_string(),
            })
        }
    };
    let (nw, nh) = op.output_dims(dims);
    Ok(clip(out, f64::from(nw), f64::from(nh)))
}

fn clip([x, y, w, h]: BBox, wf: f64, hf: f64) -> BoxOutcome {
    if x >= 0.0 && y >= 0.0 && x + w <= wf && y + h <= hf {
        return if w > 0.0 && h > 0.0 {
            BoxOutcome::Kept([x, y, w, h])
        } else {
            BoxOutcome::Dropped
        };
    }
    let x1 = x.max(0.0);
    let y1 = y.max(0.0);
    let x2 = (x + w).min(wf);
    let y2 = (y + h).min(hf);
    if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
        BoxOutcome::Dropped
    } else {
        BoxOutcome::Kept([x1, y1, x2 - x1, y2 - y1])
    }
}

pub fn apply_pixels(image: &RgbImage, op: &AugmentOp) -> RgbImage {
    match *op {
        AugmentOp::Hflip => imageops::flip_horizontal(image),
        AugmentOp::Rotate { angle } => match angle {
            Rotation::Quarter => imageops::rotate90(image),
            Rotation::Half => imageops::rotate180(image),
            Rotation::ThreeQuarter => imageops::rotate270(image),
        },
        AugmentOp::Scale { .. } => {
            let (w, h) = op.output_dims(image.dimensions());
            imageops::resize(image, w, h, imageops::FilterType::Triangle)
        }
        AugmentOp::Brightness { delta } => {
            let shift = delta * 255.0;
            let mut out = image.clone();
            for p in out.pixels_mut() {
                for c in p.0.iter_mut() {
                    *c = (f64::from(*c) + shift).round().clamp(0.0, 255.0) as u8;
                }
            }
            out
        }
        AugmentOp::GaussianBlur { sigma } => imageops::blur(image, sigma as f32),
    }
}

/// Result of applying one op to an image and its boxes.
#[derive(Debug, Clone)]
pub struct Applied {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub dropped: usize,
}

/// Applies `op` to pixels and, for geometric ops, to every annotation box.
/// Boxes whose clipped width or height falls below `min_side` are dropped.
pub fn apply_op(
    image: &RgbImage,
    annotations: &[Annotation],
    op: &AugmentOp,
    min_side: f64,
) -> Result<Applied> {
    op.validate()?;
    let dims = image.dimensions();
    let pixels = apply_pixels(image, op);
    if !op.is_geometric() {
        return Ok(Applied {
            image: pixels,
            annotations: annotations.to_vec(),
            dropped: 0,
        });
    }
    let mut kept = Vec::with_capacity(annotations.len());
    let mut dropped = 0;
    for a in annotations {
        match transform_bbox(a.bbox, op, dims)? {
            BoxOutcome::Kept(b) if b[2] >= min_side && b[3] >= min_side => kept.push(Annotation {
                bbox: b,
                ..a.clone()
            }),
            _ => dropped += 1,
        }
    }
    Ok(Applied {
        image: pixels,
        annotations: kept,
        dropped,
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    crate::manifest::write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Augmented variants per source sample.
    pub multiplier: u32,
    /// Ops drawn per variant; 0 yields exact copies.
    pub ops_per_variant: u32,
    pub scale_range: (f64, f64),
    pub brightness_range: (f64, f64),
    pub blur_range: (f64, f64),
    /// Boxes clipped below this side length (pixels) are dropped.
    pub min_box_side: f64,
    /// Abort when more than this fraction of boxes is dropped.
    pub max_drop_fraction: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            multiplier: 1,
            ops_per_variant: 2,
            scale_range: (0.8, 1.25),
            brightness_range: (-0.3, 0.3),
            blur_range: (0.5, 2.0),
            min_box_side: 2.0,
            max_drop_fraction: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.multiplier == 0 {
            return bad("augmentation multiplier must be at least 1");
        }
        let ok_range = |(lo, hi): (f64, f64), min: f64, max: f64, open_lo: bool| {
            lo <= hi && hi <= max && if open_lo { lo > min } else { lo >= min }
        };
        if !ok_range(self.scale_range, 0.5, 2.0, false) {
            return bad("scale range must lie within [0.5, 2.0]");
        }
        if !ok_range(self.brightness_range, -0.5, 0.5, false) {
            return bad("brightness range must lie within [-0.5, 0.5]");
        }
        if !ok_range(self.blur_range, 0.0, 5.0, true) {
            return bad("blur range must lie within (0, 5]");
        }
        if !(0.0..=1.0).contains(&self.max_drop_fraction) {
            return bad("max drop fraction must lie in [0, 1]");
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> AugmentOp {
        let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        match rng.random_range(0..5u32) {
            0 => AugmentOp::Hflip,
            1 => AugmentOp::Rotate {
                angle: [Rotation::Quarter, Rotation::Half, Rotation::ThreeQuarter]
                    [rng.random_range(0..3usize)],
            },
            2 => AugmentOp::Scale {
                factor: uniform(rng, self.scale_range),
            },
            3 => AugmentOp::Brightness {
                delta: uniform(rng, self.brightness_range),
            },
            _ => AugmentOp::GaussianBlur {
                sigma: uniform(rng, self.blur_range),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub policy: AugmentPolicy,
    pub seed: u64,
    /// First id handed to variants; defaults to one past the largest sample id.
    pub id_base: Option<u64>,
}

impl AugmentationPlan {
    pub fn new(policy: AugmentPolicy, seed: u64) -> Self {
        AugmentationPlan {
            policy,
            seed,
            id_base: None,
        }
    }

    /// Ops for variant `variant` (1-based) of `sample_id`.
    pub fn ops_for(&self, sample_id: u64, variant: u32) -> Vec<AugmentOp> {
        let mut rng = rng::rng_for(
            self.seed,
            &[rng::stream::AUGMENT, sample_id, u64::from(variant)],
        );
        (0..self.policy.ops_per_variant)
            .map(|_| self.policy.draw(&mut rng))
            .collect()
    }

    /// Id of variant `variant` of `source`: `base + source * multiplier + variant - 1`.
    pub fn variant_id(&self, base: u64, source: u64, variant: u32) -> Result<u64> {
        source
            .checked_mul(u64::from(self.policy.multiplier))
            .and_then(|v| v.checked_add(base))
            .and_then(|v| v.checked_add(u64::from(variant - 1)))
            .ok_or(Error::IdOverflow)
    }
}

/// Provenance of one augmented variant, stored in manifest meta under
/// `provenance.<id>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: u64,
    pub variant: u32,
    pub ops: Vec<AugmentOp>,
}

pub fn provenance_key(id: u64) -> String {
    format!("provenance.{id}")
}

pub fn variant_image_path(source: u64, variant: u32) -> String {
    format!("aug/{source}_{variant}.png")
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub manifest: DatasetManifest,
    pub boxes_total: usize,
    pub boxes_dropped: usize,
    /// Variant id -> provenance.
    pub provenance: BTreeMap<u64, Provenance>,
}

struct Variant {
    sample: Sample,
    annotations: Vec<Annotation>,
    provenance: Provenance,
    image: Option<(PathBuf, RgbImage)>,
    total: usize,
    dropped: usize,
}

/// Augments the train split only. Variant images go to
/// `<out_dir>/aug/<source>_<variant>.png`; variant `image_path`s are relative
/// to `out_dir` while originals keep theirs. With `out_dir = None` nothing is
/// written and images are not read (ids, ops and boxes only; boxes are then
/// transformed against the manifest dimensions).
pub fn augment_dataset(
    manifest: &DatasetManifest,
    plan: &AugmentationPlan,
    image_root: &Path,
    out_dir: Option<&Path>,
) -> Result<AugmentOutput> {
    plan.policy.validate()?;
    manifest.validate()?;
    let base = match plan.id_base {
        Some(b) => b,
        None => manifest
            .max_sample_id()
            .map_or(Some(0), |m| m.checked_add(1))
            .ok_or(Error::IdOverflow)?,
    };
    let ann_base = manifest
        .annotations
        .iter()
        .map(|a| a.id)
        .max()
        .map_or(Some(0), |m| m.checked_add(1))
        .ok_or(Error::IdOverflow)?;
    let mult = plan.policy.multiplier;
    let train: Vec<&Sample> = manifest
        .samples
        .iter()
        .filter(|s| s.split == Some(Split::Train))
        .collect();
    let mut anns_by_sample: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for a in &manifest.annotations {
        anns_by_sample.entry(a.sample_id).or_default().push(a.clone());
    }

    let variants: Vec<Vec<Variant>> = train
        .par_iter()
        .map(|s| {
            let anns = anns_by_sample.get(&s.id).map(Vec::as_slice).unwrap_or(&[]);
            let source_image = match out_dir {
                Some(_) => {
                    let img = load_rgb(&image_root.join(&s.image_path))?;
                    if img.dimensions() != (s.width, s.height) {
                        return Err(Error::ImageDimensions {
                            id: s.id,
                            expected: (s.width, s.height),
                            got: img.dimensions(),
                        });
                    }
                    Some(img)
                }
                None => None,
            };
            (1..=mult)
                .map(|v| {
                    let id = plan.variant_id(base, s.id, v)?;
                    let ops = plan.ops_for(s.id, v);
                    let mut dims = (s.width, s.height);
                    let mut boxes: Vec<Annotation> = anns.to_vec();
                    let mut img = source_image.clone();
                    let mut dropped = 0;
                    for op in &ops {
                        op.validate()?;
                        if let Some(cur) = img.as_ref() {
                            let applied = apply_op(cur, &boxes, op, plan.policy.min_box_side)?;
                            dropped += applied.dropped;
                            boxes = applied.annotations;
                            img = Some(applied.image);
                        } else if op.is_geometric() {
                            let mut kept = Vec::with_capacity(boxes.len());
                            for a in boxes {
                                match transform_bbox(a.bbox, op, dims)? {
                                    BoxOutcome::Kept(b)
                                        if b[2] >= plan.policy.min_box_side
                                            && b[3] >= plan.policy.min_box_side =>
                                    {
                                        kept.push(Annotation { bbox: b, ..a })
                                    }
                                    _ => dropped += 1,
                                }
                            }
                            boxes = kept;
                        }
                        dims = op.output_dims(dims);
                    }
                    let annotations = boxes
                        .into_iter()
                        .map(|a| {
                            let new_id = a
                                .id
                                .checked_mul(u64::from(mult))
                                .and_then(|x| x.checked_add(ann_base))
                                .and_then(|x| x.checked_add(u64::from(v - 1)))
                                .ok_or(Error::IdOverflow)?;
                            Ok(Annotation {
                                id: new_id,
                                sample_id: id,
                                ..a
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let rel = variant_image_path(s.id, v);
                    let mut sample = Sample {
                        id,
                        image_path: rel.clone(),
                        width: dims.0,
                        height: dims.1,
                        ..(*s).clone()
                    };
                    sample.tags.insert("augmented".into());
                    Ok(Variant {
                        sample,
                        annotations,
                        provenance: Provenance {
                            source: s.id,
                            variant: v,
                            ops,
                        },
                        image: match (out_dir, img) {
                            (Some(dir), Some(img)) => Some((dir.join(rel), img)),
                            _ => None,
                        },
                        total: anns.len(),
                        dropped,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let variants: Vec<Variant> = variants.into_iter().flatten().collect();
    let boxes_total: usize = variants.iter().map(|v| v.total).sum();
    let boxes_dropped: usize = variants.iter().map(|v| v.dropped).sum();
    if boxes_total > 0 && boxes_dropped as f64 > plan.policy.max_drop_fraction * boxes_total as f64 {
        return Err(Error::TooManyDropped {
            dropped: boxes_dropped,
            total: boxes_total,
            limit: plan.policy.max_drop_fraction,
        });
    }
    variants
        .par_iter()
        .filter_map(|v| v.image.as_ref())
        .try_for_each(|(path, img)| save_png(img, path))?;

    let mut out = manifest.clone();
    let mut provenance = BTreeMap::new();
    for v in variants {
        if manifest.sample(v.sample.id).is_some() {
            return Err(Error::DuplicateId {
                what: "sample",
                id: v.sample.id,
            });
        }
        out.meta.insert(
            provenance_key(v.sample.id),
            serde_json::to_string(&v.provenance)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?,
        );
        provenance.insert(v.sample.id, v.provenance);
        out.samples.push(v.sample);
        out.annotations.extend(v.annotations);
    }
    out.canonicalize();
    out.validate()?;
    Ok(AugmentOutput {
        manifest: out,
        boxes_total,
        boxes_dropped,
        provenance,
    })
}

/// Label-preserving perturbation menu used for uncertainty scoring:
/// brightness, blur and at most ±10% scaling, never rotation or flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationMenu {
    pub brightness: f64,
    pub blur: (f64, f64),
    pub scale: f64,
}

impl Default for PerturbationMenu {
    fn default() -> Self {
        PerturbationMenu {
            brightness: 0.2,
            blur: (0.3, 1.2),
            scale: 0.1,
        }
    }
}

/// The ops of the `i`-th (1-based) of `n` perturbations of `sample_id`.
pub fn uncertainty_ops(
    menu: &PerturbationMenu,
    seed: u64,
    sample_id: u64,
    i: usize,
    n: usize,
) -> Result<Vec<AugmentOp>> {
    if i == 0 || i > n {
        return Err(Error::InvalidParameter(format!(
            "perturbation index {i} outside 1..={n}"
        )));
    }
    let mut rng = rng::rng_for(seed, &[rng::stream::PERTURB, sample_id, i as u64]);
    let delta = rng.random_range(-menu.brightness..=menu.brightness);
    let sigma = rng.random_range(menu.blur.0..=menu.blur.1);
    let factor = 1.0 + rng.random_range(-menu.scale..=menu.scale);
    let ops = vec![
        AugmentOp::Brightness { delta },
        AugmentOp::GaussianBlur { sigma },
        AugmentOp::Scale { factor },
    ];
    for op in &ops {
        op.validate()?;
    }
    Ok(ops)
}

pub fn perturb_for_uncertainty(
    image: &RgbImage,
    seed: u64,
    sample_id: u64,
    i: usize,
    n: usize,
) -> Result<RgbImage> {
    let ops = uncertainty_ops(&PerturbationMenu::default(), seed, sample_id, i, n)?;
    Ok(ops.iter().fold(image.clone(), |img, op| apply_pixels(&img, op)))
}
