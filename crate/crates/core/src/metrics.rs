//! Content progression and satisfaction metrics: conditional view
//! probability (CVP), content survival rate (CSR), engagement and play rates,
//! per-genre latency curves, and offline classifier metrics.
//!
//! Undefined results (empty denominators, single-class inputs) are `None`
//! and render as `n/a`; they are never silently zero.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{
    hours_to_ticks, ticks_to_hours, ArmId, ContentId, GenreId, ImpressionEvent, SlotKind, Stage, Surface, SurfaceMap,
    Tick, WatchOutcome, TICKS_PER_DAY,
};
use crate::experiments::DesignKind;
use crate::sim::EventSink;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A ratio that may be undefined.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metric(pub Option<f64>);

impl Metric {
    pub fn value(self) -> Option<f64> {
        self.0
    }
}

impl From<Option<f64>> for Metric {
    fn from(v: Option<f64>) -> Self {
        Metric(v)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.6}"),
            None => f.write_str("n/a"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) if v.is_finite() => s.serialize_f64(v),
            _ => s.serialize_str("n/a"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric(Some(v))),
            Raw::Text(t) if t == "n/a" => Ok(Metric(None)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected number or n/a, got `{t}`"))),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Content created before this is excluded from the cohort.
    pub warmup_days: f64,
    /// Views are counted for this long after creation; content created too
    /// late to complete the window is excluded.
    pub observe_days: f64,
    /// Thresholds `x` of the CVP(x | views_min) curve.
    pub cvp_thresholds: Vec<u32>,
    /// Activity bar of CSR: views gained within the horizon.
    pub csr_x: u32,
    /// Content age at which CSR starts counting.
    pub csr_age_h: f64,
    pub csr_horizons_h: Vec<f64>,
    /// Edges of the half-open delivery-latency buckets; the last bucket is open.
    pub latency_buckets_h: Vec<f64>,
    /// Threshold `x` of the per-genre latency curves.
    pub latency_cvp_x: u32,
    /// Window for "views_min delivered in time".
    pub delivery_window_h: f64,
    pub f1_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            warmup_days: 2.0,
            observe_days: 5.0,
            cvp_thresholds: vec![100, 200, 500, 1_000, 2_000, 5_000],
            csr_x: 20,
            csr_age_h: 48.0,
            csr_horizons_h: vec![12.0, 24.0, 48.0],
            latency_buckets_h: vec![0.0, 6.0, 12.0, 24.0, 48.0],
            latency_cvp_x: 1_000,
            delivery_window_h: 48.0,
            f1_threshold: 0.5,
        }
    }
}

impl MetricsConfig {
    pub fn observe_ticks(&self) -> Tick {
        hours_to_ticks(self.observe_days * 24.0)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: &str| Err(MetricError::InvalidInput(m.to_string()));
        if !(self.warmup_days >= 0.0) {
            return bad("metrics.warmup_days must be >= 0");
        }
        if !(self.observe_days > 0.0) {
            return bad("metrics.observe_days must be > 0");
        }
        if self.csr_x == 0 {
            return bad("metrics.csr_x must be > 0");
        }
        let longest = self.csr_horizons_h.iter().copied().fold(0.0, f64::max);
        if self.csr_horizons_h.iter().any(|h| !(*h >= 0.0)) || self.csr_age_h < 0.0 {
            return bad("metrics.csr_horizons_h must be >= 0");
        }
        if self.csr_age_h + longest > self.observe_days * 24.0 {
            return bad("metrics.csr_age_h plus the longest csr horizon exceeds metrics.observe_days");
        }
        if self.latency_buckets_h.is_empty() || self.latency_buckets_h.windows(2).any(|w| w[0] >= w[1]) {
            return bad("metrics.latency_buckets_h must be non-empty and strictly increasing");
        }
        if !(0.0..=1.0).contains(&self.f1_threshold) {
            return bad("metrics.f1_threshold must be in [0, 1]");
        }
        Ok(())
    }
}

/// View history of one content item.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub id: ContentId,
    pub genre: GenreId,
    pub created_at: Tick,
    pub views_min: u32,
    pub content_arm: Option<ArmId>,
    /// `(tick, cumulative views)`, strictly increasing in both.
    pub series: Vec<(Tick, u32)>,
}

impl LedgerEntry {
    pub fn views(&self) -> u32 {
        self.series.last().map_or(0, |&(_, v)| v)
    }

    /// Views at the latest recorded tick `<= t`.
    pub fn views_at(&self, t: Tick) -> u32 {
        let i = self.series.partition_point(|&(tick, _)| tick <= t);
        if i == 0 {
            0
        } else {
            self.series[i - 1].1
        }
    }

    fn record(&mut self, t: Tick) {
        match self.series.last_mut() {
            Some((last, v)) if *last == t => *v += 1,
            Some(&mut (_, v)) => self.series.push((t, v + 1)),
            None => self.series.push((t, 1)),
        }
    }
}

/// Per-content view histories. Views are multiplied by `scale` before any
/// threshold comparison; per-arm ledgers of user-split experiments use it to
/// project an arm's share of views to full traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewLedger {
    pub entries: Vec<LedgerEntry>,
    pub scale: f64,
}

impl Default for ViewLedger {
    fn default() -> Self {
        Self { entries: Vec::new(), scale: 1.0 }
    }
}

impl ViewLedger {
    pub fn new(entries: Vec<LedgerEntry>) -> Self {
        Self { entries, scale: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(&LedgerEntry) -> bool) -> ViewLedger {
        ViewLedger { entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(), scale: self.scale }
    }

    fn reaches(&self, views: u32, threshold: f64) -> bool {
        views as f64 * self.scale >= threshold
    }

    /// Tick at which the entry's scaled views first reached its views_min.
    pub fn met_at(&self, e: &LedgerEntry) -> Option<Tick> {
        e.series.iter().find(|&&(_, v)| self.reaches(v, e.views_min as f64)).map(|&(t, _)| t)
    }

    /// Delivery latency of views_min in ticks.
    pub fn latency(&self, e: &LedgerEntry) -> Option<Tick> {
        self.met_at(e).map(|t| t - e.created_at)
    }
}

fn check_threshold(name: &str, v: i64) -> Result<f64, MetricError> {
    if v < 0 {
        return Err(MetricError::InvalidInput(format!("{name} must be non-negative, got {v}")));
    }
    Ok(v as f64)
}

/// CVP(x | y): among content with at least `y` views, the share with at least `x`.
pub fn cvp(ledger: &ViewLedger, x: i64, y: i64) -> Result<Option<f64>, MetricError> {
    let x = check_threshold("x", x)?;
    let y = check_threshold("y", y)?;
    let (mut num, mut den) = (0u64, 0u64);
    for e in &ledger.entries {
        let v = e.views();
        if ledger.reaches(v, y) {
            den += 1;
            if ledger.reaches(v, x) {
                num += 1;
            }
        }
    }
    Ok(ratio(num, den))
}

/// CVP(x | views_min) with each content's own views_min as `y`.
pub fn cvp_views_min(ledger: &ViewLedger, x: i64) -> Result<Option<f64>, MetricError> {
    let x = check_threshold("x", x)?;
    let (mut num, mut den) = (0u64, 0u64);
    for e in &ledger.entries {
        let v = e.views();
        if ledger.reaches(v, e.views_min as f64) {
            den += 1;
            if ledger.reaches(v, x) {
                num += 1;
            }
        }
    }
    Ok(ratio(num, den))
}

fn csr_counts(
    ledger: &ViewLedger,
    x: u32,
    t_prime: Tick,
    mut start: impl FnMut(&LedgerEntry) -> Option<(Tick, f64)>,
) -> Option<f64> {
    let (mut num, mut den) = (0u64, 0u64);
    for e in &ledger.entries {
        let Some((t, y)) = start(e) else { continue };
        let at = e.views_at(t);
        if ledger.reaches(at, y) {
            den += 1;
            let gained = e.views_at(t.saturating_add(t_prime)) - at;
            if ledger.reaches(gained, x as f64) {
                num += 1;
            }
        }
    }
    ratio(num, den)
}

/// CSR: among content with at least `y` views at tick `t`, the share that
/// gains at least `x` more by `t + t_prime`.
pub fn csr(ledger: &ViewLedger, y: i64, x: u32, t: Tick, t_prime: Tick) -> Result<Option<f64>, MetricError> {
    let y = check_threshold("y", y)?;
    if x == 0 {
        return Err(MetricError::InvalidInput("x must be positive".into()));
    }
    Ok(csr_counts(ledger, x, t_prime, |_| Some((t, y))))
}

/// CSR measured on each content's own clock: `t` is its creation plus `age`
/// and `y` is its views_min.
pub fn csr_at_age(ledger: &ViewLedger, x: u32, age: Tick, t_prime: Tick) -> Result<Option<f64>, MetricError> {
    if x == 0 {
        return Err(MetricError::InvalidInput("x must be positive".into()));
    }
    Ok(csr_counts(ledger, x, t_prime, |e| Some((e.created_at + age, e.views_min as f64))))
}

/// Half-open latency buckets `[edge_i, edge_{i+1})`; the last one is open-ended.
pub fn bucket_labels(edges_h: &[f64]) -> Vec<String> {
    edges_h
        .iter()
        .enumerate()
        .map(|(i, lo)| match edges_h.get(i + 1) {
            Some(hi) => format!("[{lo},{hi})"),
            None => format!("[{lo},inf)"),
        })
        .collect()
}

fn bucket_of(edges_h: &[f64], latency_h: f64) -> Option<usize> {
    if edges_h.is_empty() || latency_h < edges_h[0] {
        return None;
    }
    Some(edges_h.partition_point(|&e| e <= latency_h) - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketPoint {
    pub bucket: String,
    pub contents: u64,
    pub cvp: Metric,
}

/// CVP(x | views_min) of one genre's content, split by views_min delivery latency.
pub fn cvp_by_latency_bucket(ledger: &ViewLedger, genre: Option<GenreId>, x: u32, edges_h: &[f64]) -> Vec<BucketPoint> {
    let mut num = vec![0u64; edges_h.len()];
    let mut den = vec![0u64; edges_h.len()];
    for e in &ledger.entries {
        if genre.is_some_and(|g| g != e.genre) {
            continue;
        }
        let Some(lat) = ledger.latency(e) else { continue };
        let Some(b) = bucket_of(edges_h, ticks_to_hours(lat as f64)) else { continue };
        den[b] += 1;
        if ledger.reaches(e.views(), x as f64) {
            num[b] += 1;
        }
    }
    bucket_labels(edges_h)
        .into_iter()
        .enumerate()
        .map(|(i, bucket)| BucketPoint { bucket, contents: den[i], cvp: ratio(num[i], den[i]).into() })
        .collect()
}

/// Play, success and engagement counts over a set of impressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SatisfactionCounter {
    pub fetches: u64,
    pub impressions: u64,
    pub plays: u64,
    pub successful: u64,
    pub skips: u64,
    pub engaged: u64,
    pub fresh_impressions: u64,
    pub fresh_plays: u64,
}

impl SatisfactionCounter {
    pub fn add(&mut self, e: &ImpressionEvent) {
        if e.position == 0 {
            self.fetches += 1;
        }
        self.impressions += 1;
        let fresh = e.slot == SlotKind::Fresh;
        self.fresh_impressions += fresh as u64;
        if e.played {
            self.plays += 1;
            self.fresh_plays += fresh as u64;
            self.successful += (e.outcome == Some(WatchOutcome::Successful)) as u64;
            self.skips += (e.outcome == Some(WatchOutcome::Skip)) as u64;
            self.engaged += e.engaged as u64;
        }
    }

    pub fn merge(&mut self, o: &SatisfactionCounter) {
        self.fetches += o.fetches;
        self.impressions += o.impressions;
        self.plays += o.plays;
        self.successful += o.successful;
        self.skips += o.skips;
        self.engaged += o.engaged;
        self.fresh_impressions += o.fresh_impressions;
        self.fresh_plays += o.fresh_plays;
    }

    pub fn engagement_per_view(&self) -> Option<f64> {
        ratio(self.engaged, self.plays)
    }

    pub fn successful_play_rate(&self) -> Option<f64> {
        ratio(self.successful, self.plays)
    }
}

/// `(engagement_per_view, successful_play_rate)`; undefined with zero plays.
pub fn satisfaction_rates(events: &[ImpressionEvent]) -> (Option<f64>, Option<f64>) {
    let mut c = SatisfactionCounter::default();
    for e in events {
        c.add(e);
    }
    (c.engagement_per_view(), c.successful_play_rate())
}

/// ROC-AUC by the rank statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::InvalidInput("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(predictions: &[bool], labels: &[bool]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(MetricError::InvalidInput("predictions and labels must be non-empty and equal length".into()));
    }
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fne > 0 { tp as f64 / (tp + fne) as f64 } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// F1 after thresholding scores at `threshold` (score >= threshold is positive).
pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricError> {
    let preds: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    f1(&preds, labels)
}

/// Relative AUC improvement over a baseline, in percent, measured above the
/// 0.5 random floor. Undefined for a baseline at or below 0.5.
pub fn rela_impr(auc_model: f64, auc_base: f64) -> Option<f64> {
    (auc_base > 0.5).then(|| ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Which events and which content an arm's report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmScope {
    /// Every event and every content item.
    All,
    /// Users split, content shared: all content, but only this arm's plays.
    UserArm(ArmId),
    /// Content split: the arm's own content with all its plays, for views and
    /// satisfaction alike.
    ContentArm(ArmId),
}

/// Streaming builder of a [`ViewLedger`] from impression events.
#[derive(Debug, Clone)]
pub struct LedgerBuilder {
    scope: ArmScope,
    catalog: u32,
    window: Tick,
    entries: Vec<Option<LedgerEntry>>,
}

impl LedgerBuilder {
    /// `window`: plays later than this many ticks after creation are ignored.
    pub fn new(scope: ArmScope, catalog: u32, window: Tick) -> Self {
        Self { scope, catalog, window, entries: Vec::new() }
    }

    pub fn add(&mut self, e: &ImpressionEvent) {
        if e.content < self.catalog {
            return;
        }
        if let ArmScope::ContentArm(a) = self.scope {
            if e.content_arm != Some(a) {
                return;
            }
        }
        let idx = (e.content - self.catalog) as usize;
        if idx >= self.entries.len() {
            self.entries.resize(idx + 1, None);
        }
        let entry = self.entries[idx].get_or_insert_with(|| LedgerEntry {
            id: e.content,
            genre: e.genre,
            created_at: e.content_created,
            views_min: e.views_min,
            content_arm: e.content_arm,
            series: Vec::new(),
        });
        let counts = match self.scope {
            ArmScope::UserArm(a) => e.arm == Some(a),
            _ => true,
        };
        if e.played && counts && e.tick < e.content_created.saturating_add(self.window) {
            entry.record(e.tick);
        }
    }

    /// Keep the cohort created in `[start, end)`.
    pub fn finish(self, start: Tick, end: Tick, scale: f64) -> ViewLedger {
        ViewLedger {
            entries: self
                .entries
                .into_iter()
                .flatten()
                .filter(|e| e.created_at >= start && e.created_at < end)
                .collect(),
            scale,
        }
    }
}

/// Cohort bounds `[start, end)` for a run of `horizon` ticks.
pub fn cohort_bounds(cfg: &MetricsConfig, horizon: Tick) -> (Tick, Tick) {
    let start = (cfg.warmup_days * TICKS_PER_DAY as f64).round() as Tick;
    let end = horizon.saturating_sub(cfg.observe_ticks());
    (start, end.max(start))
}

/// Views delivered by stage and slot kind, attributed to the viewer's arm.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArmExposure {
    pub views_early: u64,
    pub views_growth: u64,
    pub views_mature: u64,
    pub fresh_views: u64,
    /// Plays served on surfaces outside the experiment.
    pub leakage_views: u64,
    /// Impressions where the viewer's arm differs from the content's arm.
    pub cross_arm_impressions: u64,
}

impl ArmExposure {
    pub fn views(&self) -> u64 {
        self.views_early + self.views_growth + self.views_mature
    }
}

/// Exposure accounting across arms. Index 0 holds events by users without an
/// arm; index `a + 1` holds arm `a`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExposureStats {
    pub arms: Vec<ArmExposure>,
    pub total: ArmExposure,
    #[serde(skip)]
    experiment_surfaces: Option<SurfaceMap<bool>>,
}

impl ExposureStats {
    pub fn new(arms: usize, experiment_surfaces: Option<SurfaceMap<bool>>) -> Self {
        Self { arms: vec![ArmExposure::default(); arms + 1], total: ArmExposure::default(), experiment_surfaces }
    }

    pub fn add(&mut self, e: &ImpressionEvent) {
        let slot = e.arm.map_or(0, |a| a.0 as usize + 1);
        if slot >= self.arms.len() {
            self.arms.resize(slot + 1, ArmExposure::default());
        }
        let leak = self.experiment_surfaces.is_some_and(|s| !*s.get(e.surface));
        let cross = matches!((e.arm, e.content_arm), (Some(a), Some(b)) if a != b);
        for x in [&mut self.arms[slot], &mut self.total] {
            x.cross_arm_impressions += cross as u64;
            if !e.played {
                continue;
            }
            match e.stage {
                Stage::Early => x.views_early += 1,
                Stage::Growth => x.views_growth += 1,
                Stage::Mature | Stage::Expired => x.views_mature += 1,
            }
            x.fresh_views += (e.slot == SlotKind::Fresh) as u64;
            x.leakage_views += leak as u64;
        }
    }

    /// Share of all fresh-slot views taken by arm `a`.
    pub fn fresh_share(&self, a: ArmId) -> Option<f64> {
        let arm = self.arms.get(a.0 as usize + 1)?;
        ratio(arm.fresh_views, self.total.fresh_views)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceStats {
    pub surface: Surface,
    pub fetches: u64,
    pub impressions: u64,
    pub plays: u64,
    pub successful: u64,
    pub engaged: u64,
    pub fresh_impressions: u64,
    pub play_rate: Metric,
    pub successful_play_rate: Metric,
    pub engagement_per_view: Metric,
    pub engagement_per_fetch: Metric,
    pub fresh_impression_share: Metric,
}

impl SurfaceStats {
    fn from_counter(surface: Surface, c: &SatisfactionCounter) -> Self {
        Self {
            surface,
            fetches: c.fetches,
            impressions: c.impressions,
            plays: c.plays,
            successful: c.successful,
            engaged: c.engaged,
            fresh_impressions: c.fresh_impressions,
            play_rate: ratio(c.plays, c.impressions).into(),
            successful_play_rate: c.successful_play_rate().into(),
            engagement_per_view: c.engagement_per_view().into(),
            engagement_per_fetch: ratio(c.engaged, c.fetches).into(),
            fresh_impression_share: ratio(c.fresh_impressions, c.impressions).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub value: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreLatencyCurve {
    pub genre: String,
    pub points: Vec<BucketPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub cohort: u64,
    pub delivered: u64,
    pub latency_p50_h: Metric,
    pub latency_p95_h: Metric,
    pub delivered_within_window: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub cohort_size: u64,
    pub scalars: BTreeMap<String, Metric>,
    /// CVP(x | views_min) per threshold x.
    pub cvp_curve: Vec<CurvePoint>,
    /// CSR(views_min, csr_x) from the configured age, per horizon in hours.
    pub csr_curve: Vec<CurvePoint>,
    pub latency_curves: Vec<GenreLatencyCurve>,
    pub surfaces: Vec<SurfaceStats>,
    pub delivery: DeliveryStats,
    pub satisfaction: SatisfactionCounter,
}

impl MetricReport {
    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).and_then(|m| m.0)
    }
}

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

pub fn cvp_key(x: u32) -> String {
    format!("cvp_{x}_views_min")
}

pub fn csr_key(h: f64) -> String {
    format!("csr_{h}h")
}

/// Assemble a report from a finished ledger and event counters.
pub fn build_report(
    label: &str,
    ledger: &ViewLedger,
    satisfaction: &SatisfactionCounter,
    early: &SatisfactionCounter,
    surfaces: &SurfaceMap<SatisfactionCounter>,
    genres: &[String],
    cfg: &MetricsConfig,
) -> MetricReport {
    let mut scalars = BTreeMap::new();
    let cvp_curve: Vec<CurvePoint> = cfg
        .cvp_thresholds
        .iter()
        .map(|&x| {
            let v = cvp_views_min(ledger, x as i64).expect("thresholds are non-negative");
            scalars.insert(cvp_key(x), Metric(v));
            CurvePoint { x: x as f64, value: Metric(v) }
        })
        .collect();
    let age = hours_to_ticks(cfg.csr_age_h);
    let csr_curve: Vec<CurvePoint> = cfg
        .csr_horizons_h
        .iter()
        .map(|&h| {
            let v = csr_at_age(ledger, cfg.csr_x.max(1), age, hours_to_ticks(h)).expect("x is positive");
            scalars.insert(csr_key(h), Metric(v));
            CurvePoint { x: h, value: Metric(v) }
        })
        .collect();
    let mut latency_curves = vec![GenreLatencyCurve {
        genre: "all".into(),
        points: cvp_by_latency_bucket(ledger, None, cfg.latency_cvp_x, &cfg.latency_buckets_h),
    }];
    for (g, name) in genres.iter().enumerate() {
        latency_curves.push(GenreLatencyCurve {
            genre: name.clone(),
            points: cvp_by_latency_bucket(ledger, Some(g as GenreId), cfg.latency_cvp_x, &cfg.latency_buckets_h),
        });
    }

    let mut lat: Vec<f64> =
        ledger.entries.iter().filter_map(|e| ledger.latency(e)).map(|t| ticks_to_hours(t as f64)).collect();
    lat.sort_by(f64::total_cmp);
    let window = hours_to_ticks(cfg.delivery_window_h);
    let in_window = ledger.entries.iter().filter(|e| ledger.latency(e).is_some_and(|l| l < window)).count();
    let delivery = DeliveryStats {
        cohort: ledger.len() as u64,
        delivered: lat.len() as u64,
        latency_p50_h: quantile(&lat, 0.5).into(),
        latency_p95_h: quantile(&lat, 0.95).into(),
        delivered_within_window: ratio(in_window as u64, ledger.len() as u64).into(),
    };

    scalars.insert("engagement_per_view".into(), satisfaction.engagement_per_view().into());
    scalars.insert("successful_play_rate".into(), satisfaction.successful_play_rate().into());
    scalars.insert("engagement_per_impression".into(), ratio(satisfaction.engaged, satisfaction.impressions).into());
    scalars.insert("early_engagement_per_view".into(), early.engagement_per_view().into());
    scalars.insert("early_successful_play_rate".into(), early.successful_play_rate().into());
    scalars.insert("engagement_per_fetch".into(), ratio(satisfaction.engaged, satisfaction.fetches).into());
    scalars.insert("delivered_within_window".into(), delivery.delivered_within_window);
    scalars.insert("latency_p95_h".into(), delivery.latency_p95_h);

    MetricReport {
        label: label.to_string(),
        cohort_size: ledger.len() as u64,
        scalars,
        cvp_curve,
        csr_curve,
        latency_curves,
        surfaces: surfaces.iter().map(|(s, c)| SurfaceStats::from_counter(s, c)).collect(),
        delivery,
        satisfaction: *satisfaction,
    }
}

/// Streaming collector for one report scope.
#[derive(Debug, Clone)]
pub struct ScopeCollector {
    pub scope: ArmScope,
    pub ledger: LedgerBuilder,
    pub satisfaction: SatisfactionCounter,
    /// Impressions of content still in its Early stage.
    pub early: SatisfactionCounter,
    pub surfaces: SurfaceMap<SatisfactionCounter>,
}

impl ScopeCollector {
    pub fn new(scope: ArmScope, catalog: u32, window: Tick) -> Self {
        Self {
            scope,
            ledger: LedgerBuilder::new(scope, catalog, window),
            satisfaction: SatisfactionCounter::default(),
            early: SatisfactionCounter::default(),
            surfaces: SurfaceMap::default(),
        }
    }

    pub fn add(&mut self, e: &ImpressionEvent) {
        self.ledger.add(e);
        let counts = match self.scope {
            ArmScope::All => true,
            ArmScope::UserArm(a) => e.arm == Some(a),
            ArmScope::ContentArm(a) => e.content_arm == Some(a),
        };
        if counts {
            self.satisfaction.add(e);
            if e.stage == Stage::Early {
                self.early.add(e);
            }
            self.surfaces.get_mut(e.surface).add(e);
        }
    }
}

/// Report-scope collectors for a whole run: the global scope first, then one
/// per arm.
#[derive(Debug, Clone)]
pub struct RunCollector {
    pub scopes: Vec<ScopeCollector>,
    pub exposure: ExposureStats,
}

impl RunCollector {
    pub fn new(
        arm_scopes: Vec<ArmScope>,
        catalog: u32,
        window: Tick,
        experiment_surfaces: Option<SurfaceMap<bool>>,
    ) -> Self {
        let arms = arm_scopes.len();
        let mut scopes = vec![ScopeCollector::new(ArmScope::All, catalog, window)];
        scopes.extend(arm_scopes.into_iter().map(|s| ScopeCollector::new(s, catalog, window)));
        Self { scopes, exposure: ExposureStats::new(arms, experiment_surfaces) }
    }
}

impl EventSink for RunCollector {
    fn record(&mut self, e: &ImpressionEvent) {
        for s in &mut self.scopes {
            s.add(e);
        }
        self.exposure.add(e);
    }
}

impl EventSink for LedgerBuilder {
    fn record(&mut self, e: &ImpressionEvent) {
        self.add(e);
    }
}

impl EventSink for SatisfactionCounter {
    fn record(&mut self, e: &ImpressionEvent) {
        self.add(e);
    }
}

/// Everything besides the events needed to compute a run's reports. It is
/// written into the event-log header so reports can be rebuilt from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub seed: u64,
    pub horizon: Tick,
    /// Ids below this are catalog content and excluded from metrics.
    pub catalog: u32,
    pub genres: Vec<String>,
    pub design: Option<DesignKind>,
    pub arms: Vec<String>,
    pub arm_weights: Vec<f64>,
    pub experiment_surfaces: Option<SurfaceMap<bool>>,
    pub metrics: MetricsConfig,
}

/// Reports of one run: global scope, then one per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReports {
    pub global: MetricReport,
    pub arms: Vec<MetricReport>,
    pub exposure: ExposureStats,
}

impl RunMeta {
    fn arm_scopes(&self) -> Vec<(ArmScope, f64)> {
        match self.design {
            None => Vec::new(),
            Some(d) => (0..self.arms.len())
                .map(|i| {
                    let a = ArmId(i as u8);
                    if d.splits_content() {
                        (ArmScope::ContentArm(a), 1.0)
                    } else {
                        (ArmScope::UserArm(a), 1.0 / self.arm_weights[i])
                    }
                })
                .collect(),
        }
    }

    pub fn collector(&self) -> RunCollector {
        let scopes = self.arm_scopes().into_iter().map(|(s, _)| s).collect();
        RunCollector::new(scopes, self.catalog, self.metrics.observe_ticks(), self.experiment_surfaces)
    }

    pub fn reports(&self, collector: RunCollector) -> RunReports {
        let (start, end) = cohort_bounds(&self.metrics, self.horizon);
        let scales: Vec<f64> = std::iter::once(1.0).chain(self.arm_scopes().into_iter().map(|(_, w)| w)).collect();
        let labels: Vec<String> = std::iter::once("all".to_string()).chain(self.arms.iter().cloned()).collect();
        let mut reports: Vec<MetricReport> = collector
            .scopes
            .into_iter()
            .zip(scales)
            .zip(labels)
            .map(|((s, scale), label)| {
                let ledger = s.ledger.finish(start, end, scale);
                build_report(&label, &ledger, &s.satisfaction, &s.early, &s.surfaces, &self.genres, &self.metrics)
            })
            .collect();
        let global = reports.remove(0);
        RunReports { global, arms: reports, exposure: collector.exposure }
    }
}
