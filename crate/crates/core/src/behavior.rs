//! Generative user response model. Users react to the *true* affinity between
//! themselves and a content item; the serving stack only ever sees estimated
//! embeddings.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::domain::{ContentState, Surface, UserProfile, WatchOutcome};
use crate::embeddings::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorParams {
    pub play_bias_home: f64,
    pub play_bias_grid: f64,
    pub affinity_gain: f64,
    pub watch_base: f64,
    pub watch_gain: f64,
    /// Beta concentration of the watch fraction; `inf` makes it deterministic.
    pub watch_concentration: f64,
    pub engage_bias: f64,
    pub engage_gain: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self {
            play_bias_home: -1.0,
            play_bias_grid: -1.25,
            affinity_gain: 4.0,
            watch_base: 0.725,
            watch_gain: 0.6,
            watch_concentration: 5.0,
            engage_bias: -4.2,
            engage_gain: 3.0,
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Latent preference: cosine between the user and the content's true
/// embedding. Both are unit vectors.
pub fn affinity(u: &UserProfile, c: &ContentState) -> f64 {
    dot(&u.embedding, &c.true_embedding).clamp(-1.0, 1.0)
}

/// Probability that an impression turns into a play. Scroll autoplays.
pub fn play_probability(surface: Surface, affinity: f64, rel: f64, genre_appeal: f64, p: &BehaviorParams) -> f64 {
    let bias = match surface {
        Surface::Scroll => return 1.0,
        Surface::Home => p.play_bias_home,
        Surface::Grid => p.play_bias_grid,
    };
    logistic(bias + p.affinity_gain * affinity * rel * genre_appeal)
}

/// Mean watch fraction before sampling.
pub fn watch_mean(affinity: f64, rel: f64, p: &BehaviorParams) -> f64 {
    (p.watch_base + p.watch_gain * affinity * rel).clamp(0.02, 0.98)
}

/// Draw a watch time in seconds from a Beta-distributed watch fraction.
pub fn sample_watch<R: Rng + ?Sized>(rng: &mut R, affinity: f64, rel: f64, duration_s: f64, p: &BehaviorParams) -> f64 {
    let mu = watch_mean(affinity, rel, p);
    if !p.watch_concentration.is_finite() {
        return mu * duration_s;
    }
    let k = p.watch_concentration;
    let frac = Beta::new(mu * k, (1.0 - mu) * k).expect("beta parameters are positive").sample(rng);
    (frac * duration_s).clamp(0.0, duration_s)
}

/// Explicit engagement (like, share, download). Only successful plays engage.
pub fn sample_engagement<R: Rng + ?Sized>(
    rng: &mut R,
    outcome: WatchOutcome,
    affinity: f64,
    rel: f64,
    p: &BehaviorParams,
) -> bool {
    if outcome != WatchOutcome::Successful {
        return false;
    }
    rng.random::<f64>() < logistic(p.engage_bias + p.engage_gain * affinity * rel)
}
