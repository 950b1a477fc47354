//! The tick-driven simulation loop: a synthetic world of users and genres,
//! content arrivals, lifecycle bookkeeping, feed fetches and user responses.
//!
//! One run is single-threaded and fully determined by the scenario and seed.
//! Every random decision draws from a named ChaCha stream so that, for
//! example, changing a serving knob does not perturb content arrivals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{affinity, play_probability, sample_engagement, sample_watch};
use crate::domain::{
    classify_watch, hours_to_ticks, lifecycle_transition, relevance, ArmId, ContentFeatures, ContentId, ContentState,
    GenreId, ImpressionEvent, MaturityMode, SlotKind, Stage, Surface, Tick, UserProfile, WatchOutcome, TICKS_PER_DAY,
    TICKS_PER_HOUR,
};
use crate::embeddings::{
    cosine_similarity, gaussian_vector, init_genre_average, init_model_based, init_random, normalize, update_embedding,
    EmbeddingConfig, GenreIndex, InitStrategy,
};
use crate::experiments::{CompiledPlan, ExperimentError, StageArms};
use crate::io::config::ScenarioConfig;
use crate::serving::{
    apply_play, build_feed, fresh_priority, scan_depth, FeedPools, FreshBudget, FreshCandidate, Pacing,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Size and shape of the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub users: u32,
    pub contents_per_day: f64,
    pub days: f64,
    /// Graduated content present at time zero so the ranked pool is not
    /// empty. Catalog items are excluded from metrics.
    pub catalog_contents: u32,
    /// Mean feed fetches per user per day.
    pub fetches_per_user_day: f64,
    /// Log-normal sigma of per-user activity.
    pub activity_spread: f64,
    /// Weight of the user's second-favourite genre relative to the first.
    pub secondary_taste: f64,
    /// Weight of idiosyncratic taste in user embeddings.
    pub taste_noise: f64,
    pub duration_median_s: f64,
    pub duration_spread: f64,
    /// Mean initial momentum of catalog items.
    pub catalog_momentum: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            users: 50_000,
            contents_per_day: 1_000.0,
            days: 14.0,
            catalog_contents: 2_000,
            fetches_per_user_day: 4.0,
            activity_spread: 0.6,
            secondary_taste: 0.55,
            taste_noise: 1.2,
            duration_median_s: 25.0,
            duration_spread: 0.6,
            catalog_momentum: 5.0,
        }
    }
}

impl PopulationConfig {
    pub fn horizon(&self) -> Tick {
        (self.days * TICKS_PER_DAY as f64).round() as Tick
    }
}

/// Consumer of impression events, in `(tick, seq)` order.
pub trait EventSink {
    fn record(&mut self, e: &ImpressionEvent);
}

impl EventSink for Vec<ImpressionEvent> {
    fn record(&mut self, e: &ImpressionEvent) {
        self.push(e.clone());
    }
}

impl<A: EventSink, B: EventSink> EventSink for (A, B) {
    fn record(&mut self, e: &ImpressionEvent) {
        self.0.record(e);
        self.1.record(e);
    }
}

impl<S: EventSink + ?Sized> EventSink for &mut S {
    fn record(&mut self, e: &ImpressionEvent) {
        (**self).record(e);
    }
}

/// Discards events.
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _e: &ImpressionEvent) {}
}

// Named rng streams.
const STREAM_WORLD: u64 = 1;
const STREAM_ARRIVALS: u64 = 2;
const STREAM_TRAFFIC: u64 = 3;
const STREAM_EMBEDDINGS: u64 = 4;
const STREAM_SEEDS: u64 = 5;
const STREAM_SERVING: u64 = 1_000;
const STREAM_BEHAVIOR: u64 = 2_000;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Latent structure shared by users and content.
#[derive(Debug, Clone)]
pub struct World {
    pub genre_centers: Vec<Vec<f64>>,
    /// `feature_dim x dim` map from true embedding to content features.
    pub feature_map: Vec<Vec<f64>>,
    pub users: Vec<UserProfile>,
    genre_picker: WeightedIndex<f64>,
}

/// Seed-determined attributes of a new content item.
#[derive(Debug, Clone)]
pub struct ContentDraw {
    pub genre: GenreId,
    pub true_embedding: Vec<f64>,
    pub duration_s: f64,
    pub features: ContentFeatures,
    /// Uniform draws deciding throttling, taken whether or not it applies.
    pub throttle_draws: (f64, f64),
}

impl World {
    pub fn generate(scn: &ScenarioConfig, seed: u64) -> Result<Self, SimError> {
        let mut rng = stream_rng(seed, STREAM_WORLD);
        let d = scn.embedding.dim;
        let unit = 1.0 / (d as f64).sqrt();
        let genre_centers: Vec<Vec<f64>> =
            scn.genres.iter().map(|_| normalize(gaussian_vector(&mut rng, d, unit))).collect();
        let feature_map: Vec<Vec<f64>> =
            (0..scn.embedding.feature_dim).map(|_| gaussian_vector(&mut rng, d, unit)).collect();
        let priors: Vec<f64> = scn.genres.iter().map(|g| g.prior).collect();
        let genre_picker = WeightedIndex::new(&priors).map_err(|e| SimError::Invalid(format!("genres.prior: {e}")))?;

        let pop = &scn.population;
        let mean_rate = pop.fetches_per_user_day / TICKS_PER_DAY as f64;
        let spread = pop.activity_spread.max(0.0);
        let activity = LogNormal::new(-0.5 * spread * spread, spread)
            .map_err(|e| SimError::Invalid(format!("population.activity_spread: {e}")))?;
        let mut users = Vec::with_capacity(pop.users as usize);
        for id in 0..pop.users {
            let g1 = genre_picker.sample(&mut rng);
            let g2 = genre_picker.sample(&mut rng);
            let z = gaussian_vector(&mut rng, d, unit);
            let emb: Vec<f64> = (0..d)
                .map(|i| genre_centers[g1][i] + pop.secondary_taste * genre_centers[g2][i] + pop.taste_noise * z[i])
                .collect();
            users.push(UserProfile {
                id,
                embedding: normalize(emb),
                activity_rate: mean_rate * activity.sample(&mut rng),
                arm: None,
            });
        }
        Ok(Self { genre_centers, feature_map, users, genre_picker })
    }

    pub fn draw_content<R: Rng + ?Sized>(&self, rng: &mut R, scn: &ScenarioConfig) -> ContentDraw {
        let genre = self.genre_picker.sample(rng);
        let d = scn.embedding.dim;
        let coh = scn.embedding.genre_coherence.clamp(0.0, 1.0);
        let rest = (1.0 - coh * coh).sqrt();
        let z = gaussian_vector(rng, d, 1.0 / (d as f64).sqrt());
        let true_embedding = normalize((0..d).map(|i| coh * self.genre_centers[genre][i] + rest * z[i]).collect());
        let pop = &scn.population;
        let ln: f64 = rng.sample(StandardNormal);
        let duration_s = (pop.duration_median_s * (pop.duration_spread * ln).exp()).clamp(4.0, 180.0);
        let features = ContentFeatures(
            self.feature_map
                .iter()
                .map(|row| {
                    let noise: f64 = rng.sample(StandardNormal);
                    row.iter().zip(&true_embedding).map(|(a, b)| a * b).sum::<f64>() + 0.1 * noise
                })
                .collect(),
        );
        let throttle_draws = (rng.random::<f64>(), rng.random::<f64>());
        ContentDraw { genre: genre as GenreId, true_embedding, duration_s, features, throttle_draws }
    }
}

/// Initial estimated embedding under a strategy.
pub fn initial_embedding<R: Rng + ?Sized>(
    strategy: InitStrategy,
    fidelity: f64,
    draw: &ContentDraw,
    index: &GenreIndex,
    rng: &mut R,
    cfg: &EmbeddingConfig,
) -> Vec<f64> {
    match strategy {
        InitStrategy::Random => init_random(rng, cfg),
        InitStrategy::GenreAverage => init_genre_average(draw.genre, index, rng, cfg),
        InitStrategy::ModelBased => {
            let cfg = EmbeddingConfig { model_fidelity: fidelity, ..cfg.clone() };
            init_model_based(&draw.features, &draw.true_embedding, rng, &cfg)
        }
    }
}

/// Genre index pre-filled with converged embeddings of historical posts.
pub fn seeded_genre_index(world: &World, scn: &ScenarioConfig, seed: u64) -> GenreIndex {
    let mut rng = stream_rng(seed, STREAM_SEEDS);
    let mut index = GenreIndex::new(scn.embedding.dim);
    let mut id = ContentId::MAX;
    for _ in 0..scn.embedding.genre_seed_posts {
        for (g, _) in scn.genres.iter().enumerate() {
            let mut draw = world.draw_content(&mut rng, scn);
            draw.genre = g as GenreId;
            let d = scn.embedding.dim;
            let coh = scn.embedding.genre_coherence.clamp(0.0, 1.0);
            let rest = (1.0 - coh * coh).sqrt();
            let z = gaussian_vector(&mut rng, d, 1.0 / (d as f64).sqrt());
            let emb = normalize((0..d).map(|i| coh * world.genre_centers[g][i] + rest * z[i]).collect());
            index.genre_update(id, g as GenreId, &emb).expect("seed ids are unique");
            id -= 1;
        }
    }
    index
}

/// Per-content end-of-run facts not visible in the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentSummary {
    pub id: ContentId,
    pub genre: GenreId,
    pub created_at: Tick,
    pub views: u32,
    pub views_min: u32,
    pub min_views_met_at: Option<Tick>,
    pub stage: Stage,
    pub content_arm: Option<ArmId>,
    pub throttled: bool,
    pub catalog: bool,
    /// Cosine distance of the estimated to the true embedding at the end.
    pub embedding_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    pub seed: u64,
    pub horizon: Tick,
    pub catalog: u32,
    pub tau: f64,
    pub fetches: u64,
    pub impressions: u64,
    pub contents: Vec<ContentSummary>,
}

struct ContentRt {
    budget: FreshBudget,
    momentum: f64,
    seen: Vec<u64>,
    updates: u32,
    labels: StageArms,
    own_arm: Option<ArmId>,
    throttled: bool,
    catalog: bool,
}

#[derive(Clone, Copy)]
struct HeapEntry {
    priority: f64,
    id: ContentId,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // Max-heap: higher priority first, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority).then_with(|| other.id.cmp(&self.id))
    }
}

#[derive(Default)]
struct Sampler {
    cum: Vec<f64>,
    ids: Vec<ContentId>,
}

impl Sampler {
    fn total(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    fn pick(&self, x: f64) -> ContentId {
        let i = self.cum.partition_point(|&c| c <= x).min(self.ids.len() - 1);
        self.ids[i]
    }
}

/// Run one simulation, streaming impression events into `sink`.
pub fn simulate<S: EventSink + ?Sized>(
    scn: &ScenarioConfig,
    plan: &CompiledPlan,
    seed: u64,
    sink: &mut S,
) -> Result<SimSummary, SimError> {
    let tau = match scn.lifecycle.maturity_mode {
        MaturityMode::Fixed => scn.lifecycle.tau,
        MaturityMode::PopulationMean => calibrate_tau(scn, plan, seed)?,
    };
    Engine::new(scn, plan, seed, tau)?.run(sink)
}

/// Maturity threshold taken from a calibration run: the mean embedding
/// distance over graduated content at its end.
pub fn calibrate_tau(scn: &ScenarioConfig, plan: &CompiledPlan, seed: u64) -> Result<f64, SimError> {
    let mut cal = scn.clone();
    cal.lifecycle.maturity_mode = MaturityMode::Fixed;
    cal.population.days = scn.population.days.min(3.0);
    let summary = Engine::new(&cal, plan, seed, scn.lifecycle.tau)?.run(&mut NullSink)?;
    let d: Vec<f64> = summary
        .contents
        .iter()
        .filter(|c| !c.catalog && matches!(c.stage, Stage::Growth | Stage::Mature))
        .map(|c| c.embedding_distance)
        .collect();
    if d.is_empty() {
        return Ok(scn.lifecycle.tau);
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

struct Engine<'a> {
    scn: &'a ScenarioConfig,
    plan: &'a CompiledPlan,
    seed: u64,
    tau: f64,
    world: World,
    contents: Vec<ContentState>,
    rt: Vec<ContentRt>,
    live: Vec<ContentId>,
    index: GenreIndex,
    user_sampler: Option<WeightedAliasIndex<f64>>,
    arrivals_rng: ChaCha8Rng,
    traffic_rng: ChaCha8Rng,
    emb_rng: ChaCha8Rng,
    serving_rngs: Vec<ChaCha8Rng>,
    behavior_rngs: Vec<ChaCha8Rng>,
    words: usize,
    seq: u64,
    fetches: u64,
    decay: f64,
    heaps: Vec<BinaryHeap<HeapEntry>>,
    samplers: Vec<Sampler>,
}

fn partition_of(labels: &StageArms, stage: Stage) -> usize {
    labels.get(stage).map_or(0, |a| a.0 as usize + 1)
}

impl<'a> Engine<'a> {
    fn new(scn: &'a ScenarioConfig, plan: &'a CompiledPlan, seed: u64, tau: f64) -> Result<Self, SimError> {
        let mut world = World::generate(scn, seed)?;
        for u in &mut world.users {
            u.arm = plan.user_arm(u.id);
        }
        let weights: Vec<f64> = world.users.iter().map(|u| u.activity_rate).collect();
        let user_sampler = if weights.iter().any(|&w| w > 0.0) {
            Some(WeightedAliasIndex::new(weights).map_err(|e| SimError::Invalid(format!("population: {e}")))?)
        } else {
            None
        };
        let index = seeded_genre_index(&world, scn, seed);
        let n_arms = plan.arms.len();
        let decay = if scn.serving.momentum_half_life_h > 0.0 {
            0.5f64.powf(1.0 / (scn.serving.momentum_half_life_h * TICKS_PER_HOUR))
        } else {
            0.0
        };
        let words = (scn.population.users as usize).div_ceil(64);
        let mut engine = Self {
            scn,
            plan,
            seed,
            tau,
            world,
            contents: Vec::new(),
            rt: Vec::new(),
            live: Vec::new(),
            index,
            user_sampler,
            arrivals_rng: stream_rng(seed, STREAM_ARRIVALS),
            traffic_rng: stream_rng(seed, STREAM_TRAFFIC),
            emb_rng: stream_rng(seed, STREAM_EMBEDDINGS),
            serving_rngs: (0..=n_arms as u64).map(|i| stream_rng(seed, STREAM_SERVING + i)).collect(),
            behavior_rngs: (0..=n_arms as u64).map(|i| stream_rng(seed, STREAM_BEHAVIOR + i)).collect(),
            words,
            seq: 0,
            fetches: 0,
            decay,
            heaps: (0..=n_arms).map(|_| BinaryHeap::new()).collect(),
            samplers: (0..=n_arms).map(|_| Sampler::default()).collect(),
        };
        engine.seed_catalog();
        Ok(engine)
    }

    fn seed_catalog(&mut self) {
        let n = self.scn.population.catalog_contents;
        for _ in 0..n {
            let draw = self.world.draw_content(&mut self.arrivals_rng, self.scn);
            let m = -self.scn.population.catalog_momentum * (1.0 - self.arrivals_rng.random::<f64>()).ln();
            let id = self.contents.len() as ContentId;
            self.contents.push(ContentState {
                id,
                genre: draw.genre,
                created_at: 0,
                duration_s: draw.duration_s,
                est_embedding: draw.true_embedding.clone(),
                true_embedding: draw.true_embedding,
                features: draw.features,
                views: 0,
                view_series: Vec::new(),
                stage: Stage::Mature,
                min_views_met_at: None,
            });
            self.rt.push(ContentRt {
                budget: FreshBudget { views_min: 0, created_at: 0, deadline: 0, paced: false },
                momentum: m,
                seen: vec![0; self.words],
                updates: 0,
                labels: StageArms::default(),
                own_arm: None,
                throttled: false,
                catalog: true,
            });
            self.live.push(id);
        }
    }

    fn arrive(&mut self, now: Tick) {
        let id = self.contents.len() as ContentId;
        let draw = self.world.draw_content(&mut self.arrivals_rng, self.scn);
        let own = self.plan.content_arm(id);
        let labels = self.plan.stage_arms(id, own);
        let params = self.plan.content_params(own);
        let est = initial_embedding(
            params.init,
            params.model_fidelity,
            &draw,
            &self.index,
            &mut self.emb_rng,
            &self.scn.embedding,
        );
        let s = &params.serving;
        let (u_throttle, u_latency) = draw.throttle_draws;
        let throttle = s.throttle.as_ref().filter(|t| u_throttle < t.fraction);
        let budget = match throttle {
            Some(t) => FreshBudget {
                views_min: s.views_min,
                created_at: now,
                deadline: now + hours_to_ticks(t.latency_h_min + u_latency * (t.latency_h_max - t.latency_h_min)),
                paced: true,
            },
            None => FreshBudget {
                views_min: s.views_min,
                created_at: now,
                deadline: now + hours_to_ticks(s.latency_target_h),
                paced: s.pacing == Pacing::Paced,
            },
        };
        self.contents.push(ContentState {
            id,
            genre: draw.genre,
            created_at: now,
            duration_s: draw.duration_s,
            true_embedding: draw.true_embedding,
            est_embedding: est,
            features: draw.features,
            views: 0,
            view_series: Vec::new(),
            stage: Stage::Early,
            min_views_met_at: None,
        });
        self.rt.push(ContentRt {
            budget,
            momentum: 0.0,
            seen: vec![0; self.words],
            updates: 0,
            labels,
            own_arm: own,
            throttled: throttle.is_some(),
            catalog: false,
        });
        self.live.push(id);
    }

    fn run<S: EventSink + ?Sized>(mut self, sink: &mut S) -> Result<SimSummary, SimError> {
        let horizon = self.scn.population.horizon();
        let rate = self.scn.population.contents_per_day / TICKS_PER_DAY as f64;
        let total_activity: f64 = self.world.users.iter().map(|u| u.activity_rate).sum();
        let mix: Vec<f64> = Surface::ALL.iter().map(|s| *self.scn.serving.surface_mix.get(*s)).collect();
        let surface_picker =
            WeightedIndex::new(&mix).map_err(|e| SimError::Invalid(format!("serving.surface_mix: {e}")))?;
        let fetch_count = if total_activity > 0.0 {
            Some(Poisson::new(total_activity).map_err(|e| SimError::Invalid(format!("population: {e}")))?)
        } else {
            None
        };

        for now in 0..horizon {
            let arrivals = ((now + 1) as f64 * rate).floor() as u64 - (now as f64 * rate).floor() as u64;
            for _ in 0..arrivals {
                self.arrive(now);
            }
            self.lifecycle_pass(now);
            self.build_pools(now);
            let n = match &fetch_count {
                Some(p) => p.sample(&mut self.traffic_rng) as u64,
                None => 0,
            };
            for _ in 0..n {
                let user = self.user_sampler.as_ref().expect("positive activity").sample(&mut self.traffic_rng);
                let surface = Surface::ALL[surface_picker.sample(&mut self.traffic_rng)];
                self.fetch(user, surface, now, sink);
            }
        }

        let contents = self
            .contents
            .iter()
            .zip(&self.rt)
            .map(|(c, rt)| ContentSummary {
                id: c.id,
                genre: c.genre,
                created_at: c.created_at,
                views: c.views,
                views_min: rt.budget.views_min,
                min_views_met_at: c.min_views_met_at,
                stage: c.stage,
                content_arm: rt.own_arm,
                throttled: rt.throttled,
                catalog: rt.catalog,
                embedding_distance: 1.0 - cosine_similarity(&c.est_embedding, &c.true_embedding),
            })
            .collect();
        Ok(SimSummary {
            seed: self.seed,
            horizon,
            catalog: self.scn.population.catalog_contents,
            tau: self.tau,
            fetches: self.fetches,
            impressions: self.seq,
            contents,
        })
    }

    fn lifecycle_pass(&mut self, now: Tick) {
        let lc = &self.scn.lifecycle;
        let lc = crate::domain::LifecycleConfig { tau: self.tau, ..lc.clone() };
        let mut i = 0;
        while i < self.live.len() {
            let id = self.live[i] as usize;
            let rt = &mut self.rt[id];
            let c = &mut self.contents[id];
            let next = lifecycle_transition(c, now, rt.budget.views_min, &lc);
            c.stage = next;
            if next == Stage::Expired {
                rt.seen = Vec::new();
                self.live.swap_remove(i);
                continue;
            }
            if next != Stage::Early {
                rt.momentum *= self.decay;
            }
            i += 1;
        }
        // swap_remove scrambles order; keep iteration deterministic and id-sorted.
        self.live.sort_unstable();
    }

    fn build_pools(&mut self, now: Tick) {
        let boost = self.scn.serving.overdue_boost;
        let prior = self.scn.serving.momentum_prior;
        for h in &mut self.heaps {
            h.clear();
        }
        for s in &mut self.samplers {
            s.cum.clear();
            s.ids.clear();
        }
        for &id in &self.live {
            let c = &self.contents[id as usize];
            let rt = &self.rt[id as usize];
            let part = partition_of(&rt.labels, c.stage);
            match c.stage {
                Stage::Early => {
                    if c.views < rt.budget.allowance(now) {
                        let p = fresh_priority(c.views, &rt.budget, now, boost);
                        if p > 0.0 {
                            self.heaps[part].push(HeapEntry { priority: p, id });
                        }
                    }
                }
                Stage::Growth | Stage::Mature => {
                    let s = &mut self.samplers[part];
                    let w = prior + rt.momentum;
                    let total = s.total() + w;
                    s.cum.push(total);
                    s.ids.push(id);
                }
                Stage::Expired => {}
            }
        }
    }

    fn seen(&self, id: ContentId, user: usize) -> bool {
        let s = &self.rt[id as usize].seen;
        s.get(user / 64).is_some_and(|w| w >> (user % 64) & 1 == 1)
    }

    /// Partitions a fetch may draw from.
    fn visible(&self, arm: Option<ArmId>, surface: Surface) -> Vec<usize> {
        match (self.plan.design, arm) {
            (Some(_), Some(a)) if *self.plan.surfaces.get(surface) => vec![0, a.0 as usize + 1],
            _ => (0..self.heaps.len()).collect(),
        }
    }

    fn pop_fresh(&mut self, parts: &[usize], now: Tick) -> Option<HeapEntry> {
        let boost = self.scn.serving.overdue_boost;
        loop {
            let best = parts
                .iter()
                .copied()
                .filter_map(|p| self.heaps[p].peek().map(|e| (p, *e)))
                .max_by(|a, b| a.1.cmp(&b.1))?;
            let entry = self.heaps[best.0].pop().expect("peeked");
            let c = &self.contents[entry.id as usize];
            let rt = &self.rt[entry.id as usize];
            if c.stage != Stage::Early || c.views >= rt.budget.allowance(now) {
                continue;
            }
            let p = fresh_priority(c.views, &rt.budget, now, boost);
            if p <= 0.0 {
                continue;
            }
            if p < entry.priority {
                self.heaps[best.0].push(HeapEntry { priority: p, id: entry.id });
                continue;
            }
            return Some(entry);
        }
    }

    fn fetch<S: EventSink + ?Sized>(&mut self, user_idx: usize, surface: Surface, now: Tick, sink: &mut S) {
        self.fetches += 1;
        let arm = self.world.users[user_idx].arm;
        let params = self.plan.user_params(arm, surface);
        let serving = &params.serving;
        let rng_slot = match arm {
            Some(a) if *self.plan.surfaces.get(surface) => a.0 as usize + 1,
            _ => 0,
        };
        let parts = self.visible(arm, surface);

        // Fresh shortlist, skipping content this user has already seen.
        let want = (*serving.fresh_slots.get(surface) * serving.fresh_shortlist.max(1)) as usize;
        let mut shortlist: Vec<HeapEntry> = Vec::with_capacity(want);
        let mut aside: Vec<HeapEntry> = Vec::new();
        while shortlist.len() < want && aside.len() < 4 * want.max(4) {
            let Some(e) = self.pop_fresh(&parts, now) else { break };
            if self.seen(e.id, user_idx) {
                aside.push(e);
            } else {
                shortlist.push(e);
            }
        }

        // Ranked retrieval by momentum weight.
        let totals: Vec<f64> = parts.iter().map(|&p| self.samplers[p].total()).collect();
        let grand: f64 = totals.iter().sum();
        let mut ranked_ids: Vec<ContentId> = Vec::new();
        if grand > 0.0 {
            let want = serving.retrieval_size as usize;
            let rng = &mut self.serving_rngs[rng_slot];
            for _ in 0..2 * want {
                if ranked_ids.len() >= want {
                    break;
                }
                let mut x = rng.random::<f64>() * grand;
                let mut k = 0;
                while k + 1 < parts.len() && x >= totals[k] {
                    x -= totals[k];
                    k += 1;
                }
                let s = &self.samplers[parts[k]];
                if s.ids.is_empty() {
                    continue;
                }
                let id = s.pick(x);
                let cs = &self.rt[id as usize].seen;
                let seen = cs.get(user_idx / 64).is_some_and(|w| w >> (user_idx % 64) & 1 == 1);
                if !seen && !ranked_ids.contains(&id) {
                    ranked_ids.push(id);
                }
            }
        }

        let page = {
            let pools = FeedPools {
                fresh: shortlist
                    .iter()
                    .map(|e| FreshCandidate { content: &self.contents[e.id as usize], priority: e.priority })
                    .collect(),
                ranked: ranked_ids.iter().map(|&id| &self.contents[id as usize]).collect(),
            };
            let user = &self.world.users[user_idx];
            build_feed(user, surface, &pools, &mut self.serving_rngs[rng_slot], serving)
        };
        let depth = scan_depth(surface, page.items.len(), serving, &mut self.behavior_rngs[rng_slot]);

        for (pos, item) in page.items[..depth].iter().enumerate() {
            self.impress(user_idx, item.content, surface, pos, item.slot, rng_slot, now, sink);
        }

        let boost = self.scn.serving.overdue_boost;
        for e in shortlist.into_iter().chain(aside) {
            let c = &self.contents[e.id as usize];
            let rt = &self.rt[e.id as usize];
            if c.stage == Stage::Early && c.views < rt.budget.allowance(now) {
                let p = fresh_priority(c.views, &rt.budget, now, boost);
                if p > 0.0 {
                    let part = partition_of(&rt.labels, Stage::Early);
                    self.heaps[part].push(HeapEntry { priority: p, id: e.id });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn impress<S: EventSink + ?Sized>(
        &mut self,
        user_idx: usize,
        id: ContentId,
        surface: Surface,
        position: usize,
        slot: SlotKind,
        rng_slot: usize,
        now: Tick,
        sink: &mut S,
    ) {
        let scn = self.scn;
        let user = &self.world.users[user_idx];
        let c = &mut self.contents[id as usize];
        let rt = &mut self.rt[id as usize];
        rt.seen[user_idx / 64] |= 1 << (user_idx % 64);
        let genre = &scn.genres[c.genre as usize];
        let age_h = c.age_ticks(now) as f64 / TICKS_PER_HOUR;
        let rel = relevance(genre, age_h).expect("age is non-negative");
        let aff = affinity(user, c);
        let rng = &mut self.behavior_rngs[rng_slot];
        let stage = c.stage;
        let played = surface == Surface::Scroll
            || rng.random::<f64>() < play_probability(surface, aff, rel, genre.base_appeal, &scn.behavior);
        let (mut watch, mut outcome, mut engaged) = (0.0, None, false);
        if played {
            watch = sample_watch(rng, aff, rel, c.duration_s, &scn.behavior);
            let o = classify_watch(watch, c.duration_s).expect("watch time within duration");
            engaged = sample_engagement(rng, o, aff, rel, &scn.behavior);
            outcome = Some(o);
            let fx = apply_play(c, rt.budget.views_min, scn.embedding.plays_per_update, now);
            if o == WatchOutcome::Successful {
                rt.momentum += 1.0;
            }
            // Feedback reaches the embedding pipeline only after the Early stage.
            if fx.update_due && !rt.catalog && stage != Stage::Early {
                let ContentState { est_embedding, true_embedding, .. } = c;
                update_embedding(est_embedding, true_embedding, rt.updates, &mut self.emb_rng, &scn.embedding);
                rt.updates += 1;
            }
            if c.stage == Stage::Early && c.views >= rt.budget.views_min {
                c.stage = Stage::Growth;
            }
            if c.stage == Stage::Growth && 1.0 - cosine_similarity(&c.est_embedding, &c.true_embedding) <= self.tau {
                c.stage = Stage::Mature;
            }
            if c.views == scn.embedding.high_view_threshold && !rt.catalog {
                // A content id enters the index at most once; the count only
                // passes the threshold once, so the insert cannot collide.
                let _ = self.index.genre_update(c.id, c.genre, &c.est_embedding);
            }
        }
        let event = ImpressionEvent {
            seq: self.seq,
            tick: now,
            user: user.id,
            content: id,
            surface,
            position: position as u8,
            slot,
            played,
            watch_time_s: watch,
            outcome,
            engaged,
            arm: user.arm,
            content_arm: rt.own_arm,
            stage,
            genre: c.genre,
            content_created: c.created_at,
            views_min: rt.budget.views_min,
        };
        self.seq += 1;
        sink.record(&event);
    }
}
