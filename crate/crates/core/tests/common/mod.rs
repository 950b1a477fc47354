//! Shared helpers for the integration tests: scenario loading, random event
//! logs and a brute-force recomputation of every report metric.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use lifecycle_sim::domain::{
    ArmId, ImpressionEvent, SlotKind, Stage, Surface, SurfaceMap, Tick, WatchOutcome, TICKS_PER_DAY,
};
use lifecycle_sim::experiments::DesignKind;
use lifecycle_sim::io::config::{load_scenario_file, ScenarioConfig};
use lifecycle_sim::metrics::{MetricReport, MetricsConfig, RunMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

pub fn scenario(name: &str) -> ScenarioConfig {
    load_scenario_file(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// A tiny world for tests that only need a valid run.
pub fn tiny_scenario(seed: u64) -> ScenarioConfig {
    let mut s = ScenarioConfig::with_seed(seed);
    s.population.users = 300;
    s.population.contents_per_day = 20.0;
    s.population.days = 4.0;
    s.population.catalog_contents = 60;
    s.metrics.warmup_days = 1.0;
    s.metrics.observe_days = 2.5;
    s.metrics.csr_age_h = 12.0;
    s.metrics.csr_horizons_h = vec![12.0, 24.0, 48.0];
    s
}

/// Enough traffic per new post that every budget is delivered on time.
pub fn mid_scenario(seed: u64) -> ScenarioConfig {
    let mut s = ScenarioConfig::with_seed(seed);
    s.population.users = 2_000;
    s.population.contents_per_day = 60.0;
    s.population.days = 6.0;
    s.population.catalog_contents = 200;
    s.metrics.warmup_days = 1.0;
    s.metrics.observe_days = 3.0;
    s.metrics.csr_age_h = 24.0;
    s
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pick<T: Copy, R: Rng>(rng: &mut R, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// Random header for a synthetic log: small thresholds so that every metric
/// has both outcomes.
pub fn random_meta<R: Rng>(rng: &mut R) -> RunMeta {
    let design = pick(
        rng,
        &[None, Some(DesignKind::UserLevel), Some(DesignKind::UserContent), Some(DesignKind::ParallelLifecycle)],
    );
    let (arms, arm_weights) = match design {
        None => (vec![], vec![]),
        Some(_) => {
            let w: f64 = rng.random_range(0.2..0.8);
            (vec!["a".to_string(), "b".to_string()], vec![w, 1.0 - w])
        }
    };
    let metrics = MetricsConfig {
        warmup_days: 1.0,
        observe_days: 3.0,
        cvp_thresholds: vec![0, 1, 3, 8, 20, 40],
        csr_x: rng.random_range(1..4),
        csr_age_h: 12.0,
        csr_horizons_h: vec![6.0, 24.0, 60.0],
        latency_buckets_h: vec![0.0, 2.0, 6.0, 24.0],
        latency_cvp_x: 10,
        delivery_window_h: 12.0,
        f1_threshold: 0.5,
    };
    RunMeta {
        seed: 0,
        horizon: 7 * TICKS_PER_DAY,
        catalog: 10,
        genres: vec!["g0".into(), "g1".into(), "g2".into()],
        design,
        arms,
        arm_weights,
        experiment_surfaces: design.map(|_| SurfaceMap::new(true, rng.random_bool(0.5), true)),
        metrics,
    }
}

/// `n` events over `contents` items, sorted by `(tick, seq)`.
pub fn random_events<R: Rng>(rng: &mut R, meta: &RunMeta, n: usize, contents: u32) -> Vec<ImpressionEvent> {
    struct Item {
        created: Tick,
        genre: u16,
        views_min: u32,
        arm: Option<ArmId>,
    }
    let splits_content = meta.design.is_some_and(|d| d.splits_content());
    let items: Vec<Item> = (0..contents)
        .map(|_| Item {
            created: rng.random_range(0..meta.horizon - 10),
            genre: rng.random_range(0..meta.genres.len() as u16),
            views_min: rng.random_range(1..15),
            arm: if splits_content { Some(ArmId(rng.random_range(0..2))) } else { None },
        })
        .collect();
    let users = 50u32;
    let mut events: Vec<ImpressionEvent> = (0..n)
        .map(|_| {
            let content = rng.random_range(0..contents);
            let it = &items[content as usize];
            let user = rng.random_range(0..users);
            let played = rng.random_bool(0.6);
            let outcome =
                played.then(|| pick(rng, &[WatchOutcome::Successful, WatchOutcome::Skip, WatchOutcome::Partial]));
            ImpressionEvent {
                seq: 0,
                tick: rng.random_range(it.created..meta.horizon),
                user,
                content,
                surface: pick(rng, &Surface::ALL),
                position: rng.random_range(0..4),
                slot: pick(rng, &[SlotKind::Fresh, SlotKind::Ranked]),
                played,
                watch_time_s: if played { rng.random_range(0.0..30.0) } else { 0.0 },
                outcome,
                engaged: outcome == Some(WatchOutcome::Successful) && rng.random_bool(0.3),
                arm: meta.design.map(|_| ArmId((user % 2) as u8)),
                content_arm: it.arm,
                stage: pick(rng, &[Stage::Early, Stage::Growth, Stage::Mature, Stage::Expired]),
                genre: it.genre,
                content_created: it.created,
                views_min: it.views_min,
            }
        })
        .collect();
    events.sort_by_key(|e| e.tick);
    for (i, e) in events.iter_mut().enumerate() {
        e.seq = i as u64;
    }
    events
}

/// Metrics of one report scope recomputed from the whole log by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveReport {
    pub cohort: u64,
    pub cvp: Vec<Option<f64>>,
    pub csr: Vec<Option<f64>>,
    pub engagement_per_view: Option<f64>,
    pub successful_play_rate: Option<f64>,
    pub early_engagement_per_view: Option<f64>,
    pub early_successful_play_rate: Option<f64>,
    /// Per surface: fetches, impressions, plays, successful, engaged.
    pub surfaces: Vec<[u64; 5]>,
    /// Per genre ("all" first): per bucket `(contents, cvp)`.
    pub latency: Vec<Vec<(u64, Option<f64>)>>,
    pub delivered_within_window: Option<f64>,
}

fn frac(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn hours(h: f64) -> Tick {
    (h * 6.0).round() as Tick
}

/// Which scope: `None` for the global report, `Some(a)` for arm `a`.
pub fn naive_report(meta: &RunMeta, events: &[ImpressionEvent], arm: Option<u8>) -> NaiveReport {
    let cfg = &meta.metrics;
    let splits = meta.design.is_some_and(|d| d.splits_content());
    let in_scope = |e: &ImpressionEvent| match arm {
        None => true,
        Some(a) if splits => e.content_arm == Some(ArmId(a)),
        Some(a) => e.arm == Some(ArmId(a)),
    };
    let scale = match arm {
        Some(a) if !splits => 1.0 / meta.arm_weights[a as usize],
        _ => 1.0,
    };
    let start = (cfg.warmup_days * 144.0).round() as Tick;
    let window = (cfg.observe_days * 24.0 * 6.0).round() as Tick;
    let end = meta.horizon.saturating_sub(window).max(start);

    // Content with any impression visible to the scope's ledger.
    let mut plays: BTreeMap<u32, (Tick, u32, u16, Vec<Tick>)> = BTreeMap::new();
    for e in events {
        if e.content < meta.catalog {
            continue;
        }
        if splits && arm.is_some() && e.content_arm != Some(ArmId(arm.unwrap())) {
            continue;
        }
        let entry = plays.entry(e.content).or_insert((e.content_created, e.views_min, e.genre, Vec::new()));
        if e.played && in_scope(e) && e.tick < e.content_created + window {
            entry.3.push(e.tick);
        }
    }
    plays.retain(|_, v| v.0 >= start && v.0 < end);
    let reach = |views: usize, thr: f64| views as f64 * scale >= thr;
    let views_at = |ticks: &[Tick], t: Tick| ticks.iter().filter(|&&x| x <= t).count();
    let met_at = |ticks: &[Tick], vmin: u32| -> Option<Tick> {
        let mut sorted = ticks.to_vec();
        sorted.sort();
        (1..=sorted.len()).find(|&k| reach(k, vmin as f64)).map(|k| sorted[k - 1])
    };

    let cvp = cfg
        .cvp_thresholds
        .iter()
        .map(|&x| {
            let den = plays.values().filter(|v| reach(v.3.len(), v.1 as f64)).count() as u64;
            let num =
                plays.values().filter(|v| reach(v.3.len(), v.1 as f64) && reach(v.3.len(), x as f64)).count() as u64;
            frac(num, den)
        })
        .collect();
    let csr = cfg
        .csr_horizons_h
        .iter()
        .map(|&h| {
            let (mut num, mut den) = (0, 0);
            for v in plays.values() {
                let t = v.0 + hours(cfg.csr_age_h);
                let at = views_at(&v.3, t);
                if reach(at, v.1 as f64) {
                    den += 1;
                    if reach(views_at(&v.3, t + hours(h)) - at, cfg.csr_x as f64) {
                        num += 1;
                    }
                }
            }
            frac(num, den)
        })
        .collect();

    let scoped: Vec<&ImpressionEvent> = events.iter().filter(|e| in_scope(e)).collect();
    let rates = |evs: &[&ImpressionEvent]| {
        let played: Vec<_> = evs.iter().filter(|e| e.played).collect();
        let succ = played.iter().filter(|e| e.outcome == Some(WatchOutcome::Successful)).count() as u64;
        let eng = played.iter().filter(|e| e.engaged).count() as u64;
        (frac(eng, played.len() as u64), frac(succ, played.len() as u64))
    };
    let (epv, spr) = rates(&scoped);
    let early: Vec<&ImpressionEvent> = scoped.iter().copied().filter(|e| e.stage == Stage::Early).collect();
    let (eepv, espr) = rates(&early);
    let surfaces = Surface::ALL
        .iter()
        .map(|&s| {
            let evs: Vec<_> = scoped.iter().filter(|e| e.surface == s).collect();
            [
                evs.iter().filter(|e| e.position == 0).count() as u64,
                evs.len() as u64,
                evs.iter().filter(|e| e.played).count() as u64,
                evs.iter().filter(|e| e.played && e.outcome == Some(WatchOutcome::Successful)).count() as u64,
                evs.iter().filter(|e| e.played && e.engaged).count() as u64,
            ]
        })
        .collect();

    let edges = &cfg.latency_buckets_h;
    let genre_filters: Vec<Option<u16>> =
        std::iter::once(None).chain((0..meta.genres.len() as u16).map(Some)).collect();
    let latency = genre_filters
        .iter()
        .map(|g| {
            (0..edges.len())
                .map(|b| {
                    let lo = edges[b];
                    let hi = edges.get(b + 1).copied().unwrap_or(f64::INFINITY);
                    let (mut num, mut den) = (0u64, 0u64);
                    for v in plays.values().filter(|v| g.is_none_or(|g| g == v.2)) {
                        let Some(m) = met_at(&v.3, v.1) else { continue };
                        let lat_h = (m - v.0) as f64 / 6.0;
                        if lat_h >= lo && lat_h < hi {
                            den += 1;
                            num += reach(v.3.len(), cfg.latency_cvp_x as f64) as u64;
                        }
                    }
                    (den, frac(num, den))
                })
                .collect()
        })
        .collect();
    let within =
        plays.values().filter(|v| met_at(&v.3, v.1).is_some_and(|m| m - v.0 < hours(cfg.delivery_window_h))).count()
            as u64;

    NaiveReport {
        cohort: plays.len() as u64,
        cvp,
        csr,
        engagement_per_view: epv,
        successful_play_rate: spr,
        early_engagement_per_view: eepv,
        early_successful_play_rate: espr,
        surfaces,
        latency,
        delivered_within_window: frac(within, plays.len() as u64),
    }
}

/// The same quantities read off a streamed report.
pub fn streamed(r: &MetricReport) -> NaiveReport {
    let s = |k: &str| r.scalars[k].0;
    NaiveReport {
        cohort: r.cohort_size,
        cvp: r.cvp_curve.iter().map(|p| p.value.0).collect(),
        csr: r.csr_curve.iter().map(|p| p.value.0).collect(),
        engagement_per_view: s("engagement_per_view"),
        successful_play_rate: s("successful_play_rate"),
        early_engagement_per_view: s("early_engagement_per_view"),
        early_successful_play_rate: s("early_successful_play_rate"),
        surfaces: r.surfaces.iter().map(|x| [x.fetches, x.impressions, x.plays, x.successful, x.engaged]).collect(),
        latency: r.latency_curves.iter().map(|c| c.points.iter().map(|p| (p.contents, p.cvp.0)).collect()).collect(),
        delivered_within_window: s("delivered_within_window"),
    }
}

/// Run the streaming path and the oracle over one random log; `Err` names
/// the first disagreeing scope.
pub fn check_oracle(seed: u64, n: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let meta = random_meta(&mut r);
    let contents = r.random_range(20..120);
    let events = random_events(&mut r, &meta, n, contents);
    let mut c = meta.collector();
    for e in &events {
        lifecycle_sim::sim::EventSink::record(&mut c, e);
    }
    let reports = meta.reports(c);
    let got = streamed(&reports.global);
    let want = naive_report(&meta, &events, None);
    if got != want {
        return Err(format!("seed {seed} global:\n got {got:?}\nwant {want:?}"));
    }
    for (a, rep) in reports.arms.iter().enumerate() {
        let got = streamed(rep);
        let want = naive_report(&meta, &events, Some(a as u8));
        if got != want {
            return Err(format!("seed {seed} arm {a}:\n got {got:?}\nwant {want:?}"));
        }
    }
    Ok(())
}
