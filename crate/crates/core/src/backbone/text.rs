//! Deterministic text-conditioning stub.
//!
//! A prompt is split into `and`-separated clauses; each clause, keyed by its
//! position, hashes to a seeded Gaussian vector and the sum is normalized.
//! Keying by position keeps "id0 moves left and id1 moves right" distinct
//! from its mirror image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct TextConditionStub {
    pub embedding: Vec<f32>,
    pub null_flag: bool,
}

impl TextConditionStub {
    pub fn null(width: usize) -> Self {
        Self {
            embedding: vec![0.0; width],
            null_flag: true,
        }
    }

    pub fn from_prompt(prompt: &str, width: usize) -> Self {
        let mut acc = vec![0.0f64; width];
        let normalized = prompt.to_lowercase();
        for (slot, clause) in normalized.split(" and ").enumerate() {
            let clause = clause.split_whitespace().collect::<Vec<_>>().join(" ");
            if clause.is_empty() {
                continue;
            }
            let digest = Sha256::digest(format!("{slot}:{clause}").as_bytes());
            let mut seed = [0u8; 32];
            seed.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(seed);
            for a in acc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *a += z;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self::null(width);
        }
        Self {
            embedding: acc.iter().map(|v| (v / norm) as f32).collect(),
            null_flag: false,
        }
    }
}
