use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Embedder, GatewayError};

/// Deterministic offline embedder: every lowercase word is hashed to a
/// Gaussian direction, and a text embeds as the sum of its word directions.
/// Texts sharing most of their words land close together on the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(word.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let lower = text.to_lowercase();
        let mut words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            words.push(lower.trim());
        }
        let mut acc = vec![0.0; self.dimension];
        for w in words {
            for (a, x) in acc.iter_mut().zip(self.word_vector(w)) {
                *a += x;
            }
        }
        Ok(acc)
    }
}
