//! Embedding initialization strategies for new content, the feedback-driven
//! maturation update, and small vector helpers.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ContentFeatures, ContentId, GenreId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("content {0} is already part of the genre index")]
    DuplicatePost(ContentId),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// How a new content's estimated embedding is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Random,
    #[default]
    GenreAverage,
    ModelBased,
}

impl InitStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::GenreAverage => "genre_average",
            InitStrategy::ModelBased => "model_based",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    /// Per-coordinate standard deviation of random initialization.
    pub sigma: f64,
    pub eta0: f64,
    pub k0: f64,
    /// Per-coordinate standard deviation of the feedback noise in one update.
    pub noise_scale: f64,
    pub high_view_threshold: u32,
    /// Quality of the model-based stand-in, in `[0, 1]`.
    pub model_fidelity: f64,
    pub plays_per_update: u32,
    pub init: InitStrategy,
    pub feature_dim: usize,
    /// Weight of the genre centroid in a content's true embedding.
    pub genre_coherence: f64,
    /// Converged historical posts per genre that seed the genre index.
    pub genre_seed_posts: u32,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            sigma: 1.0 / (32f64).sqrt(),
            eta0: 0.3,
            k0: 20.0,
            noise_scale: 0.1,
            high_view_threshold: 10_000,
            model_fidelity: 0.8,
            plays_per_update: 10,
            init: InitStrategy::GenreAverage,
            feature_dim: 16,
            genre_coherence: 0.4,
            genre_seed_posts: 20,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale to unit norm. Zero vectors are returned unchanged.
pub fn normalize(mut a: Vec<f64>) -> Vec<f64> {
    let n = norm(&a);
    if n > 0.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
    a
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).clamp(-1.0, 1.0)
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::Dimension { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0))
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random initialization: i.i.d. `N(0, sigma^2)` coordinates.
pub fn init_random<R: Rng + ?Sized>(rng: &mut R, cfg: &EmbeddingConfig) -> Vec<f64> {
    gaussian_vector(rng, cfg.dim, cfg.sigma)
}

/// Stand-in for a learned content-to-embedding model: a mixture of the true
/// embedding and isotropic noise, `rho * e + sqrt(1 - rho^2) * g`, normalized.
///
/// The content features are accepted for interface parity with a real model
/// but the stand-in does not read them.
pub fn init_model_based<R: Rng + ?Sized>(
    _features: &ContentFeatures,
    true_emb: &[f64],
    rng: &mut R,
    cfg: &EmbeddingConfig,
) -> Vec<f64> {
    let rho = cfg.model_fidelity.clamp(0.0, 1.0);
    if rho >= 1.0 {
        return true_emb.to_vec();
    }
    let g = gaussian_vector(rng, true_emb.len(), 1.0 / (true_emb.len() as f64).sqrt());
    let mix = (1.0 - rho * rho).sqrt();
    normalize(true_emb.iter().zip(&g).map(|(e, n)| rho * e + mix * n).collect())
}

/// One maturation step toward the converged embedding:
/// `est += eta_k * ((true + noise) - est)` with `eta_k = eta0 / (1 + k/k0)`.
pub fn update_embedding<R: Rng + ?Sized>(
    est: &mut [f64],
    true_emb: &[f64],
    k: u32,
    rng: &mut R,
    cfg: &EmbeddingConfig,
) {
    let eta = cfg.eta0 / (1.0 + k as f64 / cfg.k0);
    for (e, t) in est.iter_mut().zip(true_emb) {
        let noise = if cfg.noise_scale > 0.0 { cfg.noise_scale * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        *e += eta * (t + noise - *e);
    }
}

/// Cosine distance to `true_emb` after each of `plays` plays, starting from
/// `init`. An update runs every `plays_per_update` plays, as in the simulator.
pub fn maturation_curve<R: Rng + ?Sized>(
    init: &[f64],
    true_emb: &[f64],
    plays: u32,
    rng: &mut R,
    cfg: &EmbeddingConfig,
) -> Result<Vec<f64>, EmbeddingError> {
    let mut est = init.to_vec();
    let mut k = 0;
    let mut curve = Vec::with_capacity(plays as usize + 1);
    curve.push(cosine_distance(&est, true_emb)?);
    for p in 1..=plays {
        if p % cfg.plays_per_update.max(1) == 0 {
            update_embedding(&mut est, true_emb, k, rng, cfg);
            k += 1;
        }
        curve.push(cosine_distance(&est, true_emb)?);
    }
    Ok(curve)
}

// Fixed-point scale for the genre index sums. Integer addition keeps the
// running sums exact, so averages do not depend on insertion order.
const FIXED_SCALE: f64 = (1u128 << 80) as f64;

fn to_fixed(x: f64) -> i128 {
    (x * FIXED_SCALE).round() as i128
}

#[derive(Debug, Clone, PartialEq)]
struct GenreSum {
    sum: Vec<i128>,
    count: u32,
}

/// Running per-genre sums of converged embeddings of high-view posts.
#[derive(Debug, Clone, PartialEq)]
pub struct GenreIndex {
    dim: usize,
    genres: BTreeMap<GenreId, GenreSum>,
    members: BTreeSet<ContentId>,
}

impl GenreIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, genres: BTreeMap::new(), members: BTreeSet::new() }
    }

    /// Add one post's embedding to its genre. A content id can be added once.
    pub fn genre_update(&mut self, id: ContentId, genre: GenreId, embedding: &[f64]) -> Result<(), EmbeddingError> {
        if embedding.len() != self.dim {
            return Err(EmbeddingError::Dimension { expected: self.dim, got: embedding.len() });
        }
        if !self.members.insert(id) {
            return Err(EmbeddingError::DuplicatePost(id));
        }
        let entry = self.genres.entry(genre).or_insert_with(|| GenreSum { sum: vec![0; self.dim], count: 0 });
        for (s, x) in entry.sum.iter_mut().zip(embedding) {
            *s += to_fixed(*x);
        }
        entry.count += 1;
        Ok(())
    }

    pub fn count(&self, genre: GenreId) -> u32 {
        self.genres.get(&genre).map_or(0, |g| g.count)
    }

    pub fn contains(&self, id: ContentId) -> bool {
        self.members.contains(&id)
    }

    pub fn average(&self, genre: GenreId) -> Option<Vec<f64>> {
        let g = self.genres.get(&genre).filter(|g| g.count > 0)?;
        let n = g.count as f64;
        Some(g.sum.iter().map(|&s| s as f64 / FIXED_SCALE / n).collect())
    }
}

/// Genre-average initialization, falling back to random init for genres with
/// no high-view posts yet.
pub fn init_genre_average<R: Rng + ?Sized>(
    genre: GenreId,
    index: &GenreIndex,
    rng: &mut R,
    cfg: &EmbeddingConfig,
) -> Vec<f64> {
    index.average(genre).unwrap_or_else(|| init_random(rng, cfg))
}
