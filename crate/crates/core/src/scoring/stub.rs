//! Deterministic stand-in for an image–text encoder: a seeded hash of the
//! content bytes drives a Gaussian draw that is then unit-normalized.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{EmbeddingKind, EmbeddingTable, PromptSet};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::rng::stream;
use crate::scalar::{cast, Scalar};

pub const DEFAULT_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubScorer {
    pub dim: usize,
    pub seed: u64,
}

impl Default for StubScorer {
    fn default() -> Self {
        StubScorer {
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

impl StubScorer {
    pub fn new(dim: usize, seed: u64) -> Self {
        StubScorer { dim, seed }
    }

    /// Pseudo-embedding of arbitrary content; `domain` separates image bytes
    /// from prompt text so equal bytes in both never collide.
    pub fn embed_bytes<T: Scalar>(&self, domain: u8, bytes: &[u8]) -> Result<Vec<T>> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stream::STUB.to_le_bytes());
        h.update([domain]);
        h.update(bytes);
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        super::normalize(&mut v)?;
        let mut out: Vec<T> = v.into_iter().map(cast::<T>).collect();
        super::normalize(&mut out)?;
        Ok(out)
    }

    pub fn embed_image<T: Scalar>(&self, path: &Path) -> Result<Vec<T>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.embed_bytes(b'i', &bytes)
    }

    pub fn embed_text<T: Scalar>(&self, text: &str) -> Result<Vec<T>> {
        self.embed_bytes(b't', text.as_bytes())
    }

    /// Embeds every manifest image, resolving paths against `image_root`.
    pub fn embed_manifest<T: Scalar>(
        &self,
        manifest: &DatasetManifest,
        image_root: &Path,
    ) -> Result<EmbeddingTable<T>> {
        let vectors: Vec<(u64, Vec<T>)> = manifest
            .samples
            .par_iter()
            .map(|s| Ok((s.id, self.embed_image(&image_root.join(&s.image_path))?)))
            .collect::<Result<_>>()?;
        let mut table = EmbeddingTable::new(self.dim, EmbeddingKind::Image)?;
        for (id, v) in vectors {
            table.insert(id, v)?;
        }
        Ok(table)
    }

    pub fn prompt_set<T: Scalar>(
        &self,
        scenario: &str,
        prompts: &[String],
    ) -> Result<PromptSet<T>> {
        let mut table = EmbeddingTable::new(self.dim, EmbeddingKind::Text)?;
        for (i, p) in prompts.iter().enumerate() {
            table.insert(i as u64, self.embed_text(p)?)?;
        }
        PromptSet::new(scenario, prompts.to_vec(), table)
    }
}
