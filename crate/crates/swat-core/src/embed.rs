//! Text/image embedder abstraction and the deterministic toy embedder.
//!
//! Ranking retrieved candidates and initializing the classifier head both go
//! through [`TextImageEmbedder`]. A real CLIP-style model can implement the
//! trait later; for desk-scale runs and tests [`HashEmbedder`] stands in: it
//! hashes tokens to seeded Gaussian vectors, so equal strings embed equally
//! (a caption identical to a prompt scores cosine 1.0) and everything is
//! reproducible from the seed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::ImagePayload;
use crate::error::{Result, SwatError};
use crate::rng;

/// Embeds captions/prompts and images into a shared space of `dim()` floats.
pub trait TextImageEmbedder {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, image: &ImagePayload<'_>) -> Result<Vec<f64>>;
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale to unit norm; the zero vector is left untouched.
pub fn normalize_in_place(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Cosine similarity; 0.0 if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Mean of the concept's prompt embeddings, re-normalized. This single
/// definition is shared by retrieval ranking and classifier-head
/// initialization so the two always agree.
pub fn prompt_mean_embedding(
    embedder: &dyn TextImageEmbedder,
    prompts: &[String],
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(SwatError::Vocabulary { message: "concept has no prompts to embed".into() });
    }
    let mut acc = vec![0.0; embedder.dim()];
    for prompt in prompts {
        let e = embedder.embed_text(prompt)?;
        if e.len() != embedder.dim() {
            return Err(SwatError::DimensionMismatch {
                context: "prompt embedding".into(),
                expected: embedder.dim(),
                got: e.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(&e) {
            *a += x;
        }
    }
    let inv = 1.0 / prompts.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    normalize_in_place(&mut acc);
    Ok(acc)
}

/// Deterministic toy embedder: each lowercase alphanumeric token hashes to a
/// seeded Gaussian direction; a string embeds as the normalized sum of its
/// token vectors. Image features pass through (length-checked, normalized);
/// image paths hash like text under a separate tag.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedder dimension must be positive");
        HashEmbedder { dim, seed }
    }

    fn token_vector(&self, tag: &str, token: &str) -> Vec<f64> {
        let token_id = rng::subseed(self.seed, token, 0);
        let mut r = rng::seeded(self.seed, tag, token_id);
        (0..self.dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
    }

    fn embed_tokens(&self, tag: &str, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let mut acc = vec![0.0; self.dim];
        let mut any = false;
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            any = true;
            for (a, x) in acc.iter_mut().zip(self.token_vector(tag, token)) {
                *a += x;
            }
        }
        if !any {
            acc = self.token_vector(tag, "");
        }
        normalize_in_place(&mut acc);
        acc
    }
}

impl TextImageEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_tokens("text", text))
    }

    fn embed_image(&self, image: &ImagePayload<'_>) -> Result<Vec<f64>> {
        match image {
            ImagePayload::Features(f) => {
                if f.len() != self.dim {
                    return Err(SwatError::DimensionMismatch {
                        context: "image feature payload vs embedder".into(),
                        expected: self.dim,
                        got: f.len(),
                    });
                }
                let mut v = f.to_vec();
                normalize_in_place(&mut v);
                Ok(v)
            }
            ImagePayload::Path(p) => Ok(self.embed_tokens("image-path", p)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_text_embeds_equally_and_unit_norm() {
        let e = HashEmbedder::new(32, 7);
        let a = e.embed_text("A Song Sparrow!").unwrap();
        let b = e.embed_text("a song sparrow").unwrap();
        assert_eq!(a, b, "tokenization is case/punctuation-insensitive");
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn different_seeds_give_different_spaces() {
        let a = HashEmbedder::new(16, 1).embed_text("tram").unwrap();
        let b = HashEmbedder::new(16, 2).embed_text("tram").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn feature_payloads_are_length_checked() {
        let e = HashEmbedder::new(4, 0);
        let err = e.embed_image(&ImagePayload::Features(&[1.0, 2.0])).unwrap_err();
        match err {
            SwatError::DimensionMismatch { expected, got, .. } => {
                assert_eq!((expected, got), (4, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
        let ok = e.embed_image(&ImagePayload::Features(&[3.0, 0.0, 0.0, 4.0])).unwrap();
        assert!((l2_norm(&ok) - 1.0).abs() < 1e-9);
        assert!((ok[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn image_paths_do_not_collide_with_text() {
        let e = HashEmbedder::new(16, 3);
        let t = e.embed_text("imgs/tram.png").unwrap();
        let i = e.embed_image(&ImagePayload::Path("imgs/tram.png")).unwrap();
        assert_ne!(t, i);
    }

    #[test]
    fn prompt_mean_matches_hand_computation() {
        let e = HashEmbedder::new(8, 11);
        let p1 = e.embed_text("a photo of a tram").unwrap();
        let p2 = e.embed_text("an old tram").unwrap();
        let mut expect: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| (a + b) / 2.0).collect();
        normalize_in_place(&mut expect);
        let got =
            prompt_mean_embedding(&e, &["a photo of a tram".into(), "an old tram".into()]).unwrap();
        for (g, x) in got.iter().zip(&expect) {
            assert!((g - x).abs() < 1e-12);
        }
    }
}
