//! Feed construction per surface: the fresh-content budget scheduler, the
//! epsilon-greedy ranker for graduated content, page layout, scan models and
//! the per-play bookkeeping applied to content state.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::domain::{ContentId, ContentState, SlotKind, Surface, SurfaceMap, Tick, UserId, UserProfile};
use crate::embeddings::cosine_similarity;

/// How fresh content consumes its exposure budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pacing {
    /// Eligible for fresh slots whenever its deficit is positive.
    #[default]
    Asap,
    /// Eligible only while behind a linear schedule ending at the deadline.
    Paced,
}

/// Deliberate slow-down for a random share of new content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Throttle {
    pub fraction: f64,
    pub latency_h_min: f64,
    pub latency_h_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServingConfig {
    pub views_min: u32,
    /// Deadline for delivering `views_min`, in hours after creation.
    pub latency_target_h: f64,
    pub pacing: Pacing,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throttle: Option<Throttle>,
    pub fresh_slots: SurfaceMap<u32>,
    pub page_size: SurfaceMap<u32>,
    pub epsilon: f64,
    pub surface_mix: SurfaceMap<f64>,
    pub overdue_boost: f64,
    /// Fresh candidates considered per reserved slot; the user's best matches
    /// by estimated embedding fill the slots. 1 means strict priority order.
    pub fresh_shortlist: u32,
    pub home_scan_mean: f64,
    pub scroll_stop_prob: f64,
    /// Candidates drawn from the graduated pool per fetch.
    pub retrieval_size: u32,
    pub momentum_half_life_h: f64,
    pub momentum_prior: f64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            views_min: 100,
            latency_target_h: 24.0,
            pacing: Pacing::Paced,
            throttle: None,
            fresh_slots: SurfaceMap::new(3, 4, 2),
            page_size: SurfaceMap::new(12, 16, 8),
            epsilon: 0.05,
            surface_mix: SurfaceMap::new(0.4, 0.2, 0.4),
            overdue_boost: 2.0,
            fresh_shortlist: 10,
            home_scan_mean: 4.0,
            scroll_stop_prob: 0.1,
            retrieval_size: 24,
            momentum_half_life_h: 24.0,
            momentum_prior: 0.5,
        }
    }
}

/// Exposure budget of one content item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreshBudget {
    pub views_min: u32,
    pub created_at: Tick,
    pub deadline: Tick,
    pub paced: bool,
}

impl FreshBudget {
    pub fn deficit(&self, views: u32) -> u32 {
        self.views_min.saturating_sub(views)
    }

    /// Views the content may have received by `now` under its pacing rule.
    pub fn allowance(&self, now: Tick) -> u32 {
        if !self.paced {
            return self.views_min;
        }
        let span = self.deadline.saturating_sub(self.created_at).max(1) as f64;
        let elapsed = (now.saturating_sub(self.created_at) + 1) as f64;
        (self.views_min as f64 * (elapsed / span).min(1.0)).ceil() as u32
    }
}

/// Earliest-deadline-first priority with deficit weighting. Higher is served
/// sooner; zero means the budget is met.
pub fn fresh_priority(views: u32, budget: &FreshBudget, now: Tick, overdue_boost: f64) -> f64 {
    let deficit = budget.deficit(views) as f64;
    if deficit == 0.0 {
        return 0.0;
    }
    let remaining = budget.deadline as i64 - now as i64;
    if remaining < 0 {
        deficit * overdue_boost
    } else {
        deficit / remaining.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FreshCandidate<'a> {
    pub content: &'a ContentState,
    pub priority: f64,
}

/// Candidate pools for one fetch, already filtered to what the user may see.
#[derive(Debug, Clone, Default)]
pub struct FeedPools<'a> {
    pub fresh: Vec<FreshCandidate<'a>>,
    pub ranked: Vec<&'a ContentState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedItem {
    pub content: ContentId,
    pub slot: SlotKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedPage {
    pub user: UserId,
    pub surface: Surface,
    pub items: Vec<FeedItem>,
}

impl FeedPage {
    pub fn fresh_count(&self) -> usize {
        self.items.iter().filter(|i| i.slot == SlotKind::Fresh).count()
    }
}

/// Reserved fresh positions: the last position of each of `fresh` equal
/// blocks, so a prefix of length `n` holds at most `ceil(n * fresh / page)`
/// fresh items.
pub fn fresh_positions(page_size: usize, fresh: usize) -> Vec<usize> {
    if fresh == 0 || page_size == 0 {
        return Vec::new();
    }
    let fresh = fresh.min(page_size);
    (0..fresh).map(|i| (i + 1) * page_size / fresh - 1).collect()
}

fn by_priority(a: &FreshCandidate<'_>, b: &FreshCandidate<'_>) -> Ordering {
    b.priority.total_cmp(&a.priority).then_with(|| a.content.id.cmp(&b.content.id))
}

/// Epsilon-greedy ordering: each slot takes the best remaining candidate by
/// cosine to the user, or with probability `epsilon` a uniform pick.
pub fn rank_candidates<R: Rng + ?Sized>(
    user_embedding: &[f64],
    pool: &[&ContentState],
    epsilon: f64,
    rng: &mut R,
) -> Vec<ContentId> {
    rank_top(user_embedding, pool, epsilon, pool.len(), rng)
}

/// [`rank_candidates`] stopped after `limit` picks.
pub fn rank_top<R: Rng + ?Sized>(
    user_embedding: &[f64],
    pool: &[&ContentState],
    epsilon: f64,
    limit: usize,
    rng: &mut R,
) -> Vec<ContentId> {
    let mut scored: Vec<(f64, ContentId)> =
        pool.iter().map(|c| (cosine_similarity(user_embedding, &c.est_embedding), c.id)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut remaining: Vec<ContentId> = scored.into_iter().map(|(_, id)| id).collect();
    let mut out = Vec::with_capacity(limit.min(remaining.len()));
    while out.len() < limit && !remaining.is_empty() {
        let pick =
            if epsilon > 0.0 && rng.random::<f64>() < epsilon { rng.random_range(0..remaining.len()) } else { 0 };
        out.push(remaining.remove(pick));
    }
    out
}

/// Assemble one feed page.
///
/// Fresh slots take the top `fresh_shortlist * fresh_slots` candidates by
/// priority and keep the user's best matches among them; the remaining
/// positions are filled by the ranker. If the pools run short the page is
/// shorter.
pub fn build_feed<R: Rng + ?Sized>(
    user: &UserProfile,
    surface: Surface,
    pools: &FeedPools<'_>,
    rng: &mut R,
    cfg: &ServingConfig,
) -> FeedPage {
    let page_size = *cfg.page_size.get(surface) as usize;
    let reserved = (*cfg.fresh_slots.get(surface) as usize).min(page_size);

    let mut fresh: Vec<FreshCandidate<'_>> = pools.fresh.iter().copied().filter(|c| c.priority > 0.0).collect();
    fresh.sort_by(by_priority);
    fresh.truncate(reserved * cfg.fresh_shortlist.max(1) as usize);
    if fresh.len() > reserved {
        let mut matched: Vec<(f64, usize)> = fresh
            .iter()
            .enumerate()
            .map(|(i, c)| (cosine_similarity(&user.embedding, &c.content.est_embedding), i))
            .collect();
        matched.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = matched[..reserved].iter().map(|&(_, i)| i).collect();
        keep.sort_unstable();
        fresh = keep.into_iter().map(|i| fresh[i]).collect();
    }

    let ranked_pool: Vec<&ContentState> =
        pools.ranked.iter().copied().filter(|c| !fresh.iter().any(|f| f.content.id == c.id)).collect();
    let ranked = rank_top(&user.embedding, &ranked_pool, cfg.epsilon, page_size - fresh.len(), rng);

    let fresh_at = fresh_positions(page_size, reserved);
    let mut fresh_iter = fresh.iter().map(|c| c.content.id);
    let mut ranked_iter = ranked.into_iter();
    let mut items = Vec::with_capacity(page_size);
    for pos in 0..page_size {
        let fresh_slot = fresh_at.binary_search(&pos).is_ok();
        let next = if fresh_slot {
            fresh_iter
                .next()
                .map(|id| FeedItem { content: id, slot: SlotKind::Fresh })
                .or_else(|| ranked_iter.next().map(|id| FeedItem { content: id, slot: SlotKind::Ranked }))
        } else {
            ranked_iter.next().map(|id| FeedItem { content: id, slot: SlotKind::Ranked })
        };
        if let Some(item) = next {
            items.push(item);
        }
    }
    FeedPage { user: user.id, surface, items }
}

/// Number of leading page items the user actually sees.
///
/// Home shows two items and the user scrolls a geometric number further;
/// Grid shows everything; Scroll autoplays until a stop event.
pub fn scan_depth<R: Rng + ?Sized>(surface: Surface, page_len: usize, cfg: &ServingConfig, rng: &mut R) -> usize {
    let depth = match surface {
        Surface::Grid => page_len,
        Surface::Home => {
            let extra = if cfg.home_scan_mean > 0.0 {
                Geometric::new(1.0 / (1.0 + cfg.home_scan_mean)).expect("valid geometric parameter").sample(rng)
                    as usize
            } else {
                0
            };
            2 + extra
        }
        Surface::Scroll => {
            if cfg.scroll_stop_prob <= 0.0 {
                page_len
            } else {
                let continues =
                    Geometric::new(cfg.scroll_stop_prob.min(1.0)).expect("valid geometric parameter").sample(rng);
                1usize.saturating_add(continues as usize)
            }
        }
    };
    depth.min(page_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlayEffects {
    /// This play delivered the content's last budgeted view.
    pub crossed_min_views: bool,
    /// An embedding update is due after this play.
    pub update_due: bool,
}

/// Count one play against a content item.
pub fn apply_play(c: &mut ContentState, views_min: u32, plays_per_update: u32, now: Tick) -> PlayEffects {
    let views = c.record_play(now);
    let crossed = c.min_views_met_at.is_none() && views >= views_min;
    if crossed {
        c.min_views_met_at = Some(now);
    }
    PlayEffects {
        crossed_min_views: crossed,
        update_due: plays_per_update > 0 && views.is_multiple_of(plays_per_update),
    }
}
