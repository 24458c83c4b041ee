//! Deterministic hashed text embedder.
//!
//! Stands in for a pretrained text encoder behind the same interface: a
//! caption maps to a fixed `[tokens, dim]` embedding. Token vectors are
//! derived by hashing the token string into an RNG stream, frozen at
//! construction. Unused positions and the empty caption use the null
//! embedding, which is also what classifier-free dropout substitutes.

use crate::error::Result;
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TextEmbedder {
    pub embed_dim: usize,
    pub max_tokens: usize,
    vocab_seed: u64,
    null_embedding: ParamId,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325_u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl TextEmbedder {
    pub fn new(
        ps: &mut ParamStore,
        embed_dim: usize,
        max_tokens: usize,
        vocab_seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng64::derive(vocab_seed, u64::MAX);
        let null = Tensor::randn(&[embed_dim], &mut rng).scale(1.0 / (embed_dim as f64).sqrt());
        let null_embedding = ps.add("text.null_emb", ParamGroup::Frozen, null)?;
        Ok(TextEmbedder {
            embed_dim,
            max_tokens,
            vocab_seed,
            null_embedding,
        })
    }

    fn token_row(&self, token: &str) -> Vec<f64> {
        let mut rng = Rng64::derive(self.vocab_seed, fnv1a(token.as_bytes()));
        let scale = 1.0 / (self.embed_dim as f64).sqrt();
        (0..self.embed_dim).map(|_| rng.normal() * scale).collect()
    }

    /// Embeds one caption into `[max_tokens, embed_dim]`. Whitespace
    /// tokenization, lowercased; overlong captions are truncated.
    pub fn encode(&self, ps: &ParamStore, caption: &str) -> Tensor {
        let null = ps.value(self.null_embedding).data().to_vec();
        let mut data = Vec::with_capacity(self.max_tokens * self.embed_dim);
        let tokens: Vec<String> = caption
            .split_whitespace()
            .take(self.max_tokens)
            .map(|t| t.to_lowercase())
            .collect();
        for t in &tokens {
            data.extend_from_slice(&self.token_row(t));
        }
        for _ in tokens.len()..self.max_tokens {
            data.extend_from_slice(&null);
        }
        Tensor::new(&[self.max_tokens, self.embed_dim], data)
    }

    /// The all-null embedding used for classifier-free dropout.
    pub fn null_sequence(&self, ps: &ParamStore) -> Tensor {
        self.encode(ps, "")
    }

    /// Stacks per-sample embeddings into `[b, max_tokens, embed_dim]`.
    pub fn encode_batch(&self, ps: &ParamStore, captions: &[&str]) -> Tensor {
        let mut data = Vec::with_capacity(captions.len() * self.max_tokens * self.embed_dim);
        for c in captions {
            data.extend_from_slice(self.encode(ps, c).data());
        }
        Tensor::new(&[captions.len(), self.max_tokens, self.embed_dim], data)
    }
}
