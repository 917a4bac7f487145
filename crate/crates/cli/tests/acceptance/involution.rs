use corecurate::augment::{apply_op, AugmentOp, Rotation};
use corecurate::manifest::Annotation;
use corecurate::rng::rng_for;
use image::{Rgb, RgbImage};
use rand::Rng;

use crate::{ensure, err, Outcome};

const IMAGES: u64 = 64;

/// Random pixels and one to six boxes on an eighth-pixel grid.
fn fixture(k: u64) -> (RgbImage, Vec<Annotation>) {
    let mut rng = rng_for(0x1f1f, &[k]);
    let (w, h) = (rng.random_range(1..=48u32), rng.random_range(1..=48u32));
    let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let boxes = rng.random_range(1..=6u64);
    let anns = (0..boxes)
        .map(|i| {
            let x = rng.random_range(0..w * 8);
            let y = rng.random_range(0..h * 8);
            let bw = rng.random_range(1..=w * 8 - x);
            let bh = rng.random_range(1..=h * 8 - y);
            Annotation {
                id: k * 10 + i,
                sample_id: k,
                category_id: rng.random_range(0..4),
                bbox: [x as f64 / 8.0, y as f64 / 8.0, bw as f64 / 8.0, bh as f64 / 8.0],
                score: None,
            }
        })
        .collect();
    (img, anns)
}

fn same_boxes(a: &[Annotation], b: &[Annotation]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.id == y.id
                && x.category_id == y.category_id
                && x.bbox.iter().zip(&y.bbox).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

pub fn run() -> Outcome {
    let quarter = AugmentOp::Rotate { angle: Rotation::Quarter };
    let three = AugmentOp::Rotate {
        angle: Rotation::ThreeQuarter,
    };
    let pairs = [
        ("hflip after hflip", AugmentOp::Hflip, AugmentOp::Hflip),
        ("rotate(270) after rotate(90)", quarter, three),
        ("rotate(90) after rotate(270)", three, quarter),
    ];
    let mut boxes = 0;
    for k in 0..IMAGES {
        let (img, anns) = fixture(k);
        boxes += anns.len();
        for (name, first, second) in &pairs {
            let once = apply_op(&img, &anns, first, 0.0).map_err(err)?;
            let twice = apply_op(&once.image, &once.annotations, second, 0.0).map_err(err)?;
            ensure(once.dropped == 0 && twice.dropped == 0, || format!("{name} dropped a box on image {k}"))?;
            ensure(twice.image.dimensions() == img.dimensions(), || {
                format!("{name} changed the size of image {k}")
            })?;
            ensure(twice.image.as_raw() == img.as_raw(), || format!("{name} changed pixels of image {k}"))?;
            ensure(same_boxes(&twice.annotations, &anns), || format!("{name} moved a box on image {k}"))?;
        }
    }
    Ok(format!("{IMAGES} images, {boxes} boxes, 3 compositions bit-exact"))
}
