//! Learner contract and the built-in linear softmax classifier.
//!
//! Training minimizes mean cross-entropy over `core ∪ corner-train` with
//! seeded mini-batch gradient descent. The toy analogue of freezing a
//! backbone is `frozen_prefix`, which pins the weight rows of the first
//! half of the features.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{canonical_string, write_atomic};
use crate::rng;
use crate::scalar::{cast, Scalar};

const SNAPSHOT_MAGIC: &[u8; 4] = b"TLP1";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample<T> {
    #[serde(rename = "id")]
    pub sample_id: u64,
    pub features: Vec<T>,
    pub label: u64,
}

/// `{"dim": int, "classes": int, "samples": [{"id", "features", "label"}]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<FeatureSample<f64>>,
}

impl FeatureDataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id) {
                return Err(Error::DuplicateId {
                    what: "feature sample",
                    id: s.sample_id,
                });
            }
            if s.features.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: s.features.len(),
                });
            }
            if s.label as usize >= self.classes {
                return Err(Error::UnknownCategory(s.label));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidRecord {
                    id: s.sample_id,
                    message: "non-finite feature".into(),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::manifest::read_to_string(path)?;
        let d: FeatureDataset = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut d = self.clone();
        d.samples.sort_by_key(|s| s.sample_id);
        write_atomic(path, canonical_string(&d)?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub frozen_prefix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
            frozen_prefix: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the training set before training, then after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Sample ids visited in each epoch, ascending.
    pub epoch_ids: Vec<Vec<u64>>,
}

/// What the continual loop needs from a model.
pub trait Learner<T: Scalar>: Clone + Send + Sync {
    fn train(&self, data: &[FeatureSample<T>], cfg: &TrainConfig) -> Result<(Self, TrainReport)>;
    fn predict(&self, features: &[T]) -> Result<Vec<T>>;

    fn predict_label(&self, features: &[T]) -> Result<u64> {
        Ok(argmax(&self.predict(features)?) as u64)
    }

    fn evaluate(&self, data: &[FeatureSample<T>]) -> Result<f64> {
        evaluate(self, data)
    }
}

/// Index of the largest entry, smallest index on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate<T: Scalar, L: Learner<T> + ?Sized>(model: &L, data: &[FeatureSample<T>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let mut correct = 0usize;
    for s in data {
        if model.predict_label(&s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Linear softmax classifier: `p = softmax(x W + b)`, `W` is
/// `num_features x num_classes` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier<T> {
    num_features: usize,
    num_classes: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> SoftmaxClassifier<T> {
    pub fn zeros(num_features: usize, num_classes: usize) -> Result<Self> {
        if num_features == 0 || num_classes == 0 {
            return Err(Error::InvalidParameter("classifier needs features and classes".into()));
        }
        Ok(SoftmaxClassifier {
            num_features,
            num_classes,
            weights: vec![T::zero(); num_features * num_classes],
            bias: vec![T::zero(); num_classes],
        })
    }

    pub fn from_parts(num_features: usize, num_classes: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != num_features * num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_features * num_classes,
                got: weights.len(),
            });
        }
        if bias.len() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                got: bias.len(),
            });
        }
        Ok(SoftmaxClassifier {
            num_features,
            num_classes,
            weights,
            bias,
        })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Feature rows held fixed when `frozen_prefix` is set.
    pub fn frozen_rows(&self) -> usize {
        self.num_features / 2
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() == self.num_features {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.num_features,
                got: x.len(),
            })
        }
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_dim(x)?;
        let mut z = self.bias.clone();
        for (f, &xf) in x.iter().enumerate() {
            let row = &self.weights[f * self.num_classes..(f + 1) * self.num_classes];
            for (zk, &w) in z.iter_mut().zip(row) {
                *zk = *zk + xf * w;
            }
        }
        Ok(z)
    }

    /// Mean cross-entropy over `data`.
    pub fn loss(&self, data: &[FeatureSample<T>]) -> Result<T> {
        if data.is_empty() {
            return Err(Error::Empty("loss data"));
        }
        let mut total = T::zero();
        for s in data {
            let z = self.logits(&s.features)?;
            let y = self.class_index(s.label)?;
            total = total + log_sum_exp(&z) - z[y];
        }
        Ok(total / cast::<T>(data.len() as f64))
    }

    fn class_index(&self, label: u64) -> Result<usize> {
        let y = label as usize;
        if y < self.num_classes {
            Ok(y)
        } else {
            Err(Error::UnknownCategory(label))
        }
    }

    /// Gradient of the mean cross-entropy over `batch`: `(dW, db)`.
    pub fn gradient(&self, batch: &[&FeatureSample<T>]) -> Result<(Vec<T>, Vec<T>)> {
        let k = self.num_classes;
        let mut gw = vec![T::zero(); self.weights.len()];
        let mut gb = vec![T::zero(); k];
        let scale = T::one() / cast::<T>(batch.len() as f64);
        for s in batch {
            let mut p = softmax(&self.logits(&s.features)?);
            let y = self.class_index(s.label)?;
            p[y] = p[y] - T::one();
            for (f, &xf) in s.features.iter().enumerate() {
                for c in 0..k {
                    gw[f * k + c] = gw[f * k + c] + xf * p[c] * scale;
                }
            }
            for c in 0..k {
                gb[c] = gb[c] + p[c] * scale;
            }
        }
        Ok((gw, gb))
    }

    fn check_data(&self, data: &[FeatureSample<T>]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        for s in data {
            self.check_dim(&s.features)?;
            self.class_index(s.label)?;
        }
        Ok(())
    }

    /// Serializes to `TLP1`: magic, u32 version, u32 features, u32 classes,
    /// then weights and bias as f64 LE.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_features as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::parse("<params>", m);
        if bytes.len() < 16 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("not a TLP1 snapshot"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != SNAPSHOT_VERSION {
            return Err(bad("unsupported TLP1 version"));
        }
        let (f, k) = (word(8) as usize, word(12) as usize);
        let n = f * k + k;
        if bytes.len() != 16 + 8 * n {
            return Err(bad("TLP1 length does not match header"));
        }
        let vals: Vec<T> = bytes[16..]
            .chunks_exact(8)
            .map(|c| cast::<T>(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::from_parts(f, k, vals[..f * k].to_vec(), vals[f * k..].to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.snapshot())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::restore(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }
}

pub fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<T: Scalar> Learner<T> for SoftmaxClassifier<T> {
    fn train(&self, data: &[FeatureSample<T>], cfg: &TrainConfig) -> Result<(Self, TrainReport)> {
        cfg.validate()?;
        self.check_data(data)?;
        // Canonical order first, so the seeded shuffle sees the same sequence
        // whatever order the caller supplied.
        let mut ordered: Vec<&FeatureSample<T>> = data.iter().collect();
        ordered.sort_by_key(|s| s.sample_id);
        for w in ordered.windows(2) {
            if w[0].sample_id == w[1].sample_id {
                return Err(Error::DuplicateId {
                    what: "training sample",
                    id: w[0].sample_id,
                });
            }
        }
        let mut model = self.clone();
        let lr = cast::<T>(cfg.learning_rate);
        let frozen = if cfg.frozen_prefix {
            model.frozen_rows() * model.num_classes
        } else {
            0
        };
        let initial = model.loss(data)?.to_f64_lossless();
        if !initial.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                last_finite: None,
            });
        }
        let mut report = TrainReport {
            epoch_losses: vec![initial],
            epoch_ids: Vec::with_capacity(cfg.epochs),
        };
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<(u64, &FeatureSample<T>)> = ordered
                .iter()
                .map(|s| {
                    (
                        rng::key(cfg.seed, &[rng::stream::TRAIN_SHUFFLE, epoch as u64, s.sample_id]),
                        *s,
                    )
                })
                .collect();
            order.sort_by_key(|(k, s)| (*k, s.sample_id));
            let order: Vec<&FeatureSample<T>> = order.into_iter().map(|(_, s)| s).collect();
            for batch in order.chunks(cfg.batch_size) {
                let (gw, gb) = model.gradient(batch)?;
                for (w, g) in model.weights.iter_mut().zip(&gw).skip(frozen) {
                    *w = *w - lr * *g;
                }
                for (b, g) in model.bias.iter_mut().zip(&gb) {
                    *b = *b - lr * *g;
                }
            }
            let loss = model.loss(data)?.to_f64_lossless();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_finite: report.epoch_losses.last().copied(),
                });
            }
            report.epoch_losses.push(loss);
            report
                .epoch_ids
                .push(ordered.iter().map(|s| s.sample_id).collect());
        }
        Ok((model, report))
    }

    fn predict(&self, features: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(features)?))
    }
}
