//! Hash-seeded token embeddings.
//!
//! Each token maps to a fixed unit-norm vector derived from its bytes, so
//! any component can embed text without holding model state. The denoiser
//! additionally owns a learned projection over these base vectors; see
//! `model::render_condition`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tinyvid_autodiff::RawTensor;

pub const DEFAULT_TEXT_WIDTH: usize = 16;

/// Token standing in for the empty condition in classifier-free guidance.
pub const UNCOND_TOKEN: &str = "<pad>";

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

fn token_seed(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Unit-norm base vector for one token.
pub fn token_embedding(token: &str, width: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(token_seed(token));
    let mut v: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
    let norm = (v.iter().map(|x| x * x).sum::<f64>()).sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Token matrix `[L, width]`; empty text falls back to the pad token.
pub fn encode_tokens(text: &str, width: usize) -> RawTensor {
    let tokens = tokenize(text);
    let tokens = if tokens.is_empty() { vec![UNCOND_TOKEN.to_string()] } else { tokens };
    let mut data = Vec::with_capacity(tokens.len() * width);
    for t in &tokens {
        data.extend(token_embedding(t, width));
    }
    RawTensor::new(vec![tokens.len(), width], data)
}

/// Mean-pooled, renormalized embedding of the whole text.
pub fn pooled_embedding(text: &str, width: usize) -> Vec<f64> {
    let toks = encode_tokens(text, width);
    let l = toks.shape()[0];
    let mut pooled = vec![0.0; width];
    for i in 0..l {
        for j in 0..width {
            pooled[j] += toks.data()[i * width + j] / l as f64;
        }
    }
    let norm = (pooled.iter().map(|x| x * x).sum::<f64>()).sqrt().max(1e-12);
    for x in &mut pooled {
        *x /= norm;
    }
    pooled
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_deterministic_and_unit_norm() {
        let a = token_embedding("meadow", 16);
        let b = token_embedding("meadow", 16);
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distinct_tokens_distinct_vectors() {
        assert_ne!(token_embedding("V", 16), token_embedding("v", 16));
        assert_ne!(token_embedding("night", 16), token_embedding("sunset", 16));
    }

    #[test]
    fn tokenizer_strips_punctuation_keeps_case() {
        assert_eq!(tokenize("V, bouncing!"), vec!["V", "bouncing"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn pooled_embedding_text_sensitive() {
        let a = pooled_embedding("V drifting over a green meadow", 16);
        let b = pooled_embedding("V drifting under a night sky", 16);
        assert_ne!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }
}
