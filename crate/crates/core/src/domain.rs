//! Core value types shared by every other module: ids and time, feed
//! surfaces, genres, content and user state, impression events, watch
//! classification, genre time-sensitivity and the content lifecycle.
//!
//! One tick is ten simulated minutes. All durations are stored in ticks
//! internally; configuration surfaces use hours.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::cosine_similarity;

pub type Tick = u32;
pub type UserId = u32;
pub type ContentId = u32;
pub type GenreId = u16;

pub const TICKS_PER_HOUR: f64 = 6.0;
pub const TICKS_PER_DAY: u32 = 144;

/// Fraction of the video that must be watched for a successful play.
pub const SUCCESS_FRACTION: f64 = 0.98;
/// Plays shorter than this many seconds count as skips.
pub const SKIP_SECONDS: f64 = 3.0;

pub fn hours_to_ticks(hours: f64) -> Tick {
    (hours * TICKS_PER_HOUR).round().max(0.0) as Tick
}

pub fn ticks_to_hours(ticks: f64) -> f64 {
    ticks / TICKS_PER_HOUR
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Feed UI surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    /// Curated click-to-play list, two items visible at a time.
    Home,
    /// 4x4 thumbnail grid, click to play.
    Grid,
    /// Full-screen autoplay stream.
    Scroll,
}

impl Surface {
    pub const ALL: [Surface; 3] = [Surface::Home, Surface::Grid, Surface::Scroll];

    pub fn as_str(self) -> &'static str {
        match self {
            Surface::Home => "home",
            Surface::Grid => "grid",
            Surface::Scroll => "scroll",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Surface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Surface {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "home" => Ok(Surface::Home),
            "grid" => Ok(Surface::Grid),
            "scroll" => Ok(Surface::Scroll),
            other => Err(DomainError::InvalidInput(format!("unknown surface `{other}`"))),
        }
    }
}

/// One value per surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SurfaceMap<T> {
    pub home: T,
    pub grid: T,
    pub scroll: T,
}

impl<T> SurfaceMap<T> {
    pub fn new(home: T, grid: T, scroll: T) -> Self {
        Self { home, grid, scroll }
    }

    pub fn get(&self, s: Surface) -> &T {
        match s {
            Surface::Home => &self.home,
            Surface::Grid => &self.grid,
            Surface::Scroll => &self.scroll,
        }
    }

    pub fn get_mut(&mut self, s: Surface) -> &mut T {
        match s {
            Surface::Home => &mut self.home,
            Surface::Grid => &mut self.grid,
            Surface::Scroll => &mut self.scroll,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Surface, &T)> {
        Surface::ALL.into_iter().map(move |s| (s, self.get(s)))
    }
}

/// Lifecycle stage. Declaration order is the forward order of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Growth,
    Mature,
    Expired,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Growth => "growth",
            Stage::Mature => "mature",
            Stage::Expired => "expired",
        }
    }

    pub fn is_live(self) -> bool {
        self != Stage::Expired
    }
}

impl FromStr for Stage {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "early" => Ok(Stage::Early),
            "growth" => Ok(Stage::Growth),
            "mature" => Ok(Stage::Mature),
            "expired" => Ok(Stage::Expired),
            other => Err(DomainError::InvalidInput(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WatchOutcome {
    Successful,
    Skip,
    Partial,
}

impl WatchOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            WatchOutcome::Successful => "successful",
            WatchOutcome::Skip => "skip",
            WatchOutcome::Partial => "partial",
        }
    }
}

impl FromStr for WatchOutcome {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "successful" => Ok(WatchOutcome::Successful),
            "skip" => Ok(WatchOutcome::Skip),
            "partial" => Ok(WatchOutcome::Partial),
            other => Err(DomainError::InvalidInput(format!("unknown outcome `{other}`"))),
        }
    }
}

/// Whether a feed slot was reserved for fresh-content exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Fresh,
    Ranked,
}

impl SlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotKind::Fresh => "fresh",
            SlotKind::Ranked => "ranked",
        }
    }
}

/// Index of an experiment arm within its plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArmId(pub u8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenreSpec {
    pub name: String,
    /// Fraction of new content created in this genre.
    pub prior: f64,
    /// Relevance half-life in hours; absent means the genre is timeless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_life_h: Option<f64>,
    pub base_appeal: f64,
}

impl GenreSpec {
    pub fn is_time_sensitive(&self) -> bool {
        self.half_life_h.is_some()
    }
}

/// Classify a play by watch time.
///
/// A complete watch wins over the skip rule, which matters only for videos
/// shorter than about 3.06 seconds.
pub fn classify_watch(watch_time_s: f64, duration_s: f64) -> Result<WatchOutcome, DomainError> {
    if !(duration_s > 0.0) {
        return Err(DomainError::InvalidInput(format!("duration must be positive, got {duration_s}")));
    }
    if !(watch_time_s >= 0.0) {
        return Err(DomainError::InvalidInput(format!("watch time must be non-negative, got {watch_time_s}")));
    }
    Ok(if watch_time_s > SUCCESS_FRACTION * duration_s {
        WatchOutcome::Successful
    } else if watch_time_s < SKIP_SECONDS {
        WatchOutcome::Skip
    } else {
        WatchOutcome::Partial
    })
}

/// Exponential relevance decay `2^(-age/half_life)`; timeless genres stay at 1.
pub fn relevance(genre: &GenreSpec, age_h: f64) -> Result<f64, DomainError> {
    if !(age_h >= 0.0) {
        return Err(DomainError::InvalidInput(format!("age must be non-negative, got {age_h}")));
    }
    Ok(match genre.half_life_h {
        None => 1.0,
        Some(hl) => (-age_h / hl).exp2(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContentFeatures(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ContentState {
    pub id: ContentId,
    pub genre: GenreId,
    pub created_at: Tick,
    pub duration_s: f64,
    pub true_embedding: Vec<f64>,
    pub est_embedding: Vec<f64>,
    pub features: ContentFeatures,
    pub views: u32,
    /// `(tick, cumulative views)`, one entry per tick with at least one play.
    pub view_series: Vec<(Tick, u32)>,
    pub stage: Stage,
    pub min_views_met_at: Option<Tick>,
}

impl ContentState {
    pub fn age_ticks(&self, now: Tick) -> Tick {
        now.saturating_sub(self.created_at)
    }

    /// Record one play at `now`. Returns the new view count.
    pub fn record_play(&mut self, now: Tick) -> u32 {
        self.views += 1;
        match self.view_series.last_mut() {
            Some((t, v)) if *t == now => *v = self.views,
            _ => self.view_series.push((now, self.views)),
        }
        self.views
    }

    /// Cumulative views at the latest recorded tick `<= t`.
    pub fn views_at(&self, t: Tick) -> u32 {
        let idx = self.view_series.partition_point(|&(tick, _)| tick <= t);
        if idx == 0 {
            0
        } else {
            self.view_series[idx - 1].1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub id: UserId,
    pub embedding: Vec<f64>,
    /// Expected feed fetches per tick, summed over surfaces.
    pub activity_rate: f64,
    pub arm: Option<ArmId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionEvent {
    /// Stable sequence number; events are ordered by `(tick, seq)`.
    pub seq: u64,
    pub tick: Tick,
    pub user: UserId,
    pub content: ContentId,
    pub surface: Surface,
    pub position: u8,
    pub slot: SlotKind,
    pub played: bool,
    pub watch_time_s: f64,
    pub outcome: Option<WatchOutcome>,
    pub engaged: bool,
    /// Arm of the viewing user.
    pub arm: Option<ArmId>,
    /// Arm the content was assigned to, if the design splits content.
    pub content_arm: Option<ArmId>,
    /// Content stage at impression time.
    pub stage: Stage,
    pub genre: GenreId,
    pub content_created: Tick,
    pub views_min: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaturityMode {
    /// Use `tau` as given.
    #[default]
    Fixed,
    /// Replace `tau` with the mean embedding distance of a calibration run.
    PopulationMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifecycleConfig {
    /// Cosine distance to the converged embedding at which content is mature.
    pub tau: f64,
    pub maturity_mode: MaturityMode,
    pub ttl_h: f64,
    pub activity_window_h: f64,
    /// Minimum views gained over the trailing window to stay live.
    pub activity_floor: u32,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            maturity_mode: MaturityMode::Fixed,
            ttl_h: 30.0 * 24.0,
            activity_window_h: 72.0,
            activity_floor: 1,
        }
    }
}

/// Advance a content's lifecycle stage.
///
/// Transitions only move forward. Expiry is checked first; the activity floor
/// applies once the content is at least one activity window old. Early and
/// Growth promotions chain within one call.
pub fn lifecycle_transition(c: &ContentState, now: Tick, views_min: u32, cfg: &LifecycleConfig) -> Stage {
    if c.stage == Stage::Expired {
        return Stage::Expired;
    }
    let age = c.age_ticks(now);
    if age > hours_to_ticks(cfg.ttl_h) {
        return Stage::Expired;
    }
    let window = hours_to_ticks(cfg.activity_window_h);
    if window > 0 && age >= window {
        let gained = c.views - c.views_at(now - window);
        if gained < cfg.activity_floor {
            return Stage::Expired;
        }
    }
    let mut stage = c.stage;
    if stage == Stage::Early && c.views >= views_min {
        stage = Stage::Growth;
    }
    if stage == Stage::Growth && 1.0 - cosine_similarity(&c.est_embedding, &c.true_embedding) <= cfg.tau {
        stage = Stage::Mature;
    }
    stage
}
