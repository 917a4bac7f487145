use corecurate::learner::{FeatureSample, SoftmaxClassifier};
use corecurate::rng::rng_for;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{ensure, err, Outcome};

const INSTANCES: u64 = 100;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn run() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..INSTANCES {
        let mut rng = rng_for(0x6ead, &[k]);
        let d = rng.random_range(1..=8usize);
        let c = rng.random_range(2..=6usize);
        let n = rng.random_range(1..=8usize);
        let labels: Vec<u64> = (0..n).map(|_| rng.random_range(0..c as u64)).collect();
        let mut gauss = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        };
        let weights: Vec<f64> = (0..d * c).map(|_| gauss(1.0)).collect();
        let bias: Vec<f64> = (0..c).map(|_| gauss(1.0)).collect();
        let batch: Vec<FeatureSample<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| FeatureSample {
                sample_id: i as u64,
                features: (0..d).map(|_| gauss(2.0)).collect(),
                label,
            })
            .collect();
        let model = SoftmaxClassifier::from_parts(d, c, weights, bias).map_err(err)?;
        let refs: Vec<&FeatureSample<f64>> = batch.iter().collect();
        let (gw, gb) = model.gradient(&refs).map_err(err)?;

        let mut analytic = gw.clone();
        analytic.extend_from_slice(&gb);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..d * c + c {
            let at = |delta: f64| -> Result<f64, String> {
                let mut m = model.clone();
                if j < d * c {
                    m.weights_mut()[j] += delta;
                } else {
                    m.bias_mut()[j - d * c] += delta;
                }
                m.loss(&batch).map_err(err)
            };
            numeric.push((at(STEP)? - at(-STEP)?) / (2.0 * STEP));
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE);
        let rel = norm(&diff) / scale;
        worst = worst.max(rel);
        ensure(rel <= TOL, || format!("instance {k} (d={d}, c={c}, n={n}): relative error {rel:e}"))?;
    }
    Ok(format!("{INSTANCES} instances, worst relative error {worst:e}"))
}
