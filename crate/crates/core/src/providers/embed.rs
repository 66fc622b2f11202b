use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Embedder;
use crate::error::{Error, Result};
use crate::text::{l2_normalize, tokenize};

/// Deterministic bag-of-tokens embedder.
///
/// Each token maps through a seeded hash to a fixed pseudo-random unit
/// vector; a text embeds as the L2-normalized sum of its token vectors.
/// Texts sharing tokens therefore have higher cosine similarity, and token
/// order is irrelevant.
#[derive(Debug)]
pub struct TokenHashEmbedder {
    dim: usize,
    seed: u64,
    cache: RwLock<HashMap<String, Arc<[f64]>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub vector: Vec<f64>,
    /// True when the text had no tokens and the fixed fallback was returned.
    pub fallback: bool,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl TokenHashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        Ok(Self {
            dim,
            seed,
            cache: RwLock::default(),
        })
    }

    /// The unit vector assigned to a single (already lowercased) token.
    pub fn token_vector(&self, token: &str) -> Arc<[f64]> {
        if let Some(v) = self.cache.read().expect("cache lock").get(token) {
            return Arc::clone(v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(fnv1a(token.as_bytes()) ^ self.seed));
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize(&mut v);
        let v: Arc<[f64]> = v.into();
        self.cache
            .write()
            .expect("cache lock")
            .insert(token.to_string(), Arc::clone(&v));
        v
    }

    pub fn embed_one(&self, text: &str) -> Embedded {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            let v = (self.dim as f64).sqrt().recip();
            return Embedded {
                vector: vec![v; self.dim],
                fallback: true,
            };
        }
        let mut sum = vec![0.0; self.dim];
        for t in &tokens {
            let tv = self.token_vector(t);
            sum.iter_mut().zip(tv.iter()).for_each(|(s, x)| *s += x);
        }
        if !l2_normalize(&mut sum) {
            // Exact cancellation is possible in principle (e.g. a token
            // repeated with its negation); treat it like an empty text.
            let v = (self.dim as f64).sqrt().recip();
            return Embedded {
                vector: vec![v; self.dim],
                fallback: true,
            };
        }
        Embedded {
            vector: sum,
            fallback: false,
        }
    }
}

impl Embedder for TokenHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(Error::invalid("embed called with no texts"));
        }
        Ok(texts
            .iter()
            .map(|t| {
                let e = self.embed_one(t);
                if e.fallback {
                    tracing::warn!(text = %t, "no tokens to embed; using fallback vector");
                }
                e.vector
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{cosine, dot};

    fn emb() -> TokenHashEmbedder {
        TokenHashEmbedder::new(256, 7).unwrap()
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let e = emb();
        assert_eq!(e.embed_one("atomic weight").vector, e.embed_one("atomic weight").vector);
        let a = e.embed_one("atomic weight of carbon").vector;
        let b = e.embed_one("carbon of weight atomic").vector;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // A fresh instance with the same seed gives identical vectors.
        assert_eq!(TokenHashEmbedder::new(256, 7).unwrap().embed_one("x").vector, e.embed_one("x").vector);
    }

    #[test]
    fn single_token_is_its_unit_vector() {
        let e = emb();
        let v = e.embed_one("Zeolite").vector;
        let t = e.token_vector("zeolite");
        for (x, y) in v.iter().zip(t.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        let e = emb();
        let a = e.embed_one("atomic weight").vector;
        let b = e.embed_one("atomic weight measurement").vector;
        let c = e.embed_one("convolutional network").vector;
        assert!(cosine(&a, &b) > cosine(&a, &c));
        // Two of three unit tokens shared: expected cosine near 2/sqrt(6).
        assert!(cosine(&a, &b) > 0.6);
    }

    #[test]
    fn disjoint_texts_are_nearly_orthogonal() {
        let e = emb();
        // Cosines of independent random unit vectors have sd ~ 1/sqrt(dim).
        let sd = 1.0 / (256f64).sqrt();
        let cos: Vec<f64> = (0..100)
            .map(|i| {
                let a = e.embed_one(&format!("alpha{i} beta{i}")).vector;
                let b = e.embed_one(&format!("gamma{i} delta{i}")).vector;
                cosine(&a, &b).abs()
            })
            .collect();
        assert!(cos.iter().filter(|&&c| c > 3.0 * sd).count() <= 3);
        assert!(cos.iter().all(|&c| c < 5.0 * sd));
    }

    #[test]
    fn empty_text_falls_back() {
        let e = emb();
        let out = e.embed_one(" -- ");
        assert!(out.fallback);
        assert!((dot(&out.vector, &out.vector) - 1.0).abs() < 1e-12);
        assert!(e.embed(&[]).is_err());
    }

    #[test]
    fn batch_permutation_permutes_output() {
        let e = emb();
        let texts: Vec<String> = ["a b", "c", "d e f"].iter().map(|s| s.to_string()).collect();
        let fwd = e.embed(&texts).unwrap();
        let rev: Vec<String> = texts.iter().rev().cloned().collect();
        let back = e.embed(&rev).unwrap();
        for (i, v) in fwd.iter().enumerate() {
            assert_eq!(v, &back[texts.len() - 1 - i]);
        }
    }
}
