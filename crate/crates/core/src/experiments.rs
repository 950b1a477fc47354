//! Online experiment designs: arm assignment, visibility routing between user
//! and content arms, per-arm treatment parameters, replicate runs and bias
//! against full-rollout counterfactuals.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::sample_watch;
use crate::domain::{classify_watch, ArmId, ContentId, Stage, Surface, SurfaceMap, WatchOutcome};
use crate::embeddings::{cosine_similarity, dot, InitStrategy};
use crate::io::config::ScenarioConfig;
use crate::metrics::{auc, f1_at, rela_impr, ArmExposure, ExposureStats, Metric, MetricReport, RunMeta, RunReports};
use crate::serving::{Pacing, ServingConfig, Throttle};
use crate::sim::{
    initial_embedding, seeded_genre_index, simulate, stream_rng, EventSink, NullSink, SimError, SimSummary, World,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("experiment configuration: {0}")]
    Config(String),
    #[error("design `{0}` needs an arm label on both user and content")]
    MissingArm(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Users split into arms; all content shared.
    UserLevel,
    /// Users and content split and paired; users only see their arm's content.
    UserContent,
    /// Content carries one arm label per lifecycle stage.
    ParallelLifecycle,
    /// Every user gets the single arm; the counterfactual reference.
    FullRollout,
}

impl DesignKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignKind::UserLevel => "user_level",
            DesignKind::UserContent => "user_content",
            DesignKind::ParallelLifecycle => "parallel_lifecycle",
            DesignKind::FullRollout => "full_rollout",
        }
    }

    pub fn splits_content(self) -> bool {
        matches!(self, DesignKind::UserContent | DesignKind::ParallelLifecycle)
    }
}

/// Which stages a user-content design confines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Confinement {
    #[default]
    AllStages,
    /// Confine only Early content; graduated content is shared.
    EarlyOnly,
}

/// How content is routed to users in one lifecycle stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageScope {
    /// Visible to every user.
    Shared,
    /// Visible to users of the content's own arm.
    Own,
    /// Visible to users of an arm drawn independently for this stage.
    Rehash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePairing {
    pub early: StageScope,
    pub growth: StageScope,
    pub mature: StageScope,
}

impl Default for StagePairing {
    fn default() -> Self {
        Self { early: StageScope::Own, growth: StageScope::Shared, mature: StageScope::Shared }
    }
}

impl StagePairing {
    pub fn all(scope: StageScope) -> Self {
        Self { early: scope, growth: scope, mature: scope }
    }

    fn as_array(&self) -> [StageScope; 3] {
        [self.early, self.growth, self.mature]
    }
}

/// Treatment knobs an arm may change. `fresh_slots` and `epsilon` act on the
/// viewing user; the rest act on the content the arm owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ArmOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fresh_slots: Option<SurfaceMap<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_target_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pacing: Option<Pacing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throttle: Option<Throttle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_fidelity: Option<f64>,
}

impl ArmOverrides {
    fn content_scoped(&self) -> ContentKnobs {
        ContentKnobs {
            views_min: self.views_min,
            latency_target_h: self.latency_target_h,
            pacing: self.pacing,
            throttle: self.throttle.clone(),
            init: self.init,
            model_fidelity: self.model_fidelity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContentKnobs {
    views_min: Option<u32>,
    latency_target_h: Option<f64>,
    pacing: Option<Pacing>,
    throttle: Option<Throttle>,
    init: Option<InitStrategy>,
    model_fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub label: String,
    pub weight: f64,
    #[serde(default)]
    pub overrides: ArmOverrides,
}

fn default_salt() -> String {
    "exp".to_string()
}

fn default_replicates() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub design: DesignKind,
    #[serde(default = "default_salt")]
    pub salt: String,
    pub arms: Vec<ArmSpec>,
    /// Seeds of the replicate runs.
    #[serde(default = "default_replicates")]
    pub replicates: Vec<u64>,
    #[serde(default)]
    pub confinement: Confinement,
    #[serde(default)]
    pub pairing: StagePairing,
    /// Surfaces the experiment runs on. Views from other surfaces are served
    /// without arm routing and show up as leakage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surfaces: Option<Vec<Surface>>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = |m: String| Err(ExperimentError::Config(m));
        match self.design {
            DesignKind::FullRollout if self.arms.len() != 1 => {
                return cfg(format!("full_rollout takes exactly 1 arm, got {}", self.arms.len()));
            }
            DesignKind::FullRollout => {}
            _ if self.arms.len() < 2 => {
                return cfg(format!("{} needs at least 2 arms", self.design.as_str()));
            }
            _ => {}
        }
        if self.arms.len() > 250 {
            return cfg("at most 250 arms are supported".into());
        }
        if self.replicates.is_empty() {
            return cfg("experiment.replicates is empty".into());
        }
        let total: f64 = self.arms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.arms.iter().any(|a| !(a.weight > 0.0)) {
            return cfg(format!("experiment.arms.weight must be positive and sum to 1, got {total}"));
        }
        for (i, a) in self.arms.iter().enumerate() {
            let ok =
                !a.label.is_empty() && a.label.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_');
            if !ok {
                return cfg(format!("experiment.arms.label `{}` must be non-empty [A-Za-z0-9_-]", a.label));
            }
            if self.arms[..i].iter().any(|b| b.label == a.label) {
                return cfg(format!("duplicate experiment.arms.label `{}`", a.label));
            }
        }
        if self.design == DesignKind::UserLevel {
            let first = self.arms[0].overrides.content_scoped();
            if let Some(a) = self.arms.iter().find(|a| a.overrides.content_scoped() != first) {
                return cfg(format!(
                    "arm `{}` changes a content-level knob (views_min, latency_target_h, pacing, \
                     throttle, init or model_fidelity) under user_level; content is shared by all \
                     arms, so the arms would compete for one exposure budget and the measured \
                     delta would not be the treatment effect. Use user_content or \
                     parallel_lifecycle instead",
                    a.label
                ));
            }
        }
        Ok(())
    }

    /// Arm labels in declaration order.
    pub fn labels(&self) -> Vec<String> {
        self.arms.iter().map(|a| a.label.clone()).collect()
    }

    fn scopes(&self) -> [StageScope; 3] {
        match self.design {
            DesignKind::UserLevel | DesignKind::FullRollout => StagePairing::all(StageScope::Shared).as_array(),
            DesignKind::UserContent => match self.confinement {
                Confinement::AllStages => StagePairing::all(StageScope::Own).as_array(),
                Confinement::EarlyOnly => StagePairing::default().as_array(),
            },
            DesignKind::ParallelLifecycle => self.pairing.as_array(),
        }
    }
}

/// Stable hash of `(salt, id)` mapped onto cumulative weight buckets.
pub fn assign_arm(entity_id: u64, salt: &str, weights: &[f64]) -> ArmId {
    // FNV-1a over the salt and id, then a splitmix64 finalizer for avalanche.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in salt.bytes().chain([0xff]).chain(entity_id.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return ArmId(i as u8);
        }
    }
    ArmId(weights.len().saturating_sub(1) as u8)
}

/// Arm label of a content item in each live stage; `None` means shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageArms(pub [Option<ArmId>; 3]);

impl StageArms {
    pub fn get(&self, stage: Stage) -> Option<ArmId> {
        match stage {
            Stage::Early => self.0[0],
            Stage::Growth => self.0[1],
            Stage::Mature => self.0[2],
            Stage::Expired => None,
        }
    }
}

/// May a user of `user_arm` see content with `labels` in `stage`?
pub fn route_visibility(
    design: DesignKind,
    user_arm: Option<ArmId>,
    labels: &StageArms,
    stage: Stage,
) -> Result<bool, ExperimentError> {
    if stage == Stage::Expired {
        return Ok(false);
    }
    match design {
        DesignKind::UserLevel | DesignKind::FullRollout => Ok(true),
        DesignKind::UserContent | DesignKind::ParallelLifecycle => match labels.get(stage) {
            None => Ok(true),
            Some(arm) => {
                let user = user_arm.ok_or(ExperimentError::MissingArm(design.as_str()))?;
                Ok(user == arm)
            }
        },
    }
}

/// Effective parameters of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledArm {
    pub label: String,
    pub weight: f64,
    pub serving: ServingConfig,
    pub init: InitStrategy,
    pub model_fidelity: f64,
}

/// A plan resolved against a base scenario, ready for the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPlan {
    pub design: Option<DesignKind>,
    pub scopes: [StageScope; 3],
    /// Arm 0 doubles as the base parameters when there is no experiment.
    pub arms: Vec<CompiledArm>,
    pub base: CompiledArm,
    pub salt: String,
    pub surfaces: SurfaceMap<bool>,
}

impl CompiledPlan {
    /// No experiment: one unlabeled population.
    pub fn none(serving: &ServingConfig, init: InitStrategy, model_fidelity: f64) -> Self {
        let base = CompiledArm { label: "all".into(), weight: 1.0, serving: serving.clone(), init, model_fidelity };
        Self {
            design: None,
            scopes: StagePairing::all(StageScope::Shared).as_array(),
            arms: vec![base.clone()],
            base,
            salt: String::new(),
            surfaces: SurfaceMap::new(true, true, true),
        }
    }

    pub fn compile(
        plan: &ExperimentPlan,
        serving: &ServingConfig,
        init: InitStrategy,
        model_fidelity: f64,
    ) -> Result<Self, ExperimentError> {
        plan.validate()?;
        let base = Self::none(serving, init, model_fidelity).base;
        let mut arms = Vec::with_capacity(plan.arms.len());
        for spec in &plan.arms {
            let o = &spec.overrides;
            let mut s = serving.clone();
            if let Some(v) = o.fresh_slots {
                s.fresh_slots = v;
            }
            if let Some(v) = o.epsilon {
                s.epsilon = v;
            }
            if let Some(v) = o.views_min {
                s.views_min = v;
            }
            if let Some(v) = o.latency_target_h {
                s.latency_target_h = v;
            }
            if let Some(v) = o.pacing {
                s.pacing = v;
            }
            if let Some(v) = &o.throttle {
                s.throttle = Some(v.clone());
            }
            for surface in Surface::ALL {
                if s.fresh_slots.get(surface) > s.page_size.get(surface) {
                    return Err(ExperimentError::Config(format!(
                        "arm `{}`: fresh_slots.{surface} exceeds page_size.{surface}",
                        spec.label
                    )));
                }
            }
            if !(0.0..=1.0).contains(&s.epsilon) || s.views_min == 0 || !(s.latency_target_h > 0.0) {
                return Err(ExperimentError::Config(format!("arm `{}`: override out of range", spec.label)));
            }
            let fidelity = o.model_fidelity.unwrap_or(model_fidelity);
            if !(0.0..=1.0).contains(&fidelity) {
                return Err(ExperimentError::Config(format!("arm `{}`: model_fidelity must be in [0, 1]", spec.label)));
            }
            arms.push(CompiledArm {
                label: spec.label.clone(),
                weight: spec.weight,
                serving: s,
                init: o.init.unwrap_or(init),
                model_fidelity: fidelity,
            });
        }
        let mut surfaces = SurfaceMap::new(true, true, true);
        if let Some(list) = &plan.surfaces {
            surfaces = SurfaceMap::new(false, false, false);
            for s in list {
                *surfaces.get_mut(*s) = true;
            }
        }
        Ok(Self { design: Some(plan.design), scopes: plan.scopes(), arms, base, salt: plan.salt.clone(), surfaces })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.arms.iter().map(|a| a.weight).collect()
    }

    pub fn user_arm(&self, user: u32) -> Option<ArmId> {
        self.design?;
        Some(assign_arm(user as u64, &format!("{}/user", self.salt), &self.weights()))
    }

    /// The content's own arm, for designs that split content.
    pub fn content_arm(&self, id: ContentId) -> Option<ArmId> {
        if !self.design?.splits_content() {
            return None;
        }
        Some(assign_arm(id as u64, &format!("{}/content", self.salt), &self.weights()))
    }

    pub fn stage_arms(&self, id: ContentId, own: Option<ArmId>) -> StageArms {
        let mut out = [None; 3];
        let stages = ["early", "growth", "mature"];
        for (i, scope) in self.scopes.iter().enumerate() {
            out[i] = match scope {
                StageScope::Shared => None,
                StageScope::Own => own,
                StageScope::Rehash => {
                    own.map(|_| assign_arm(id as u64, &format!("{}/content/{}", self.salt, stages[i]), &self.weights()))
                }
            };
        }
        StageArms(out)
    }

    /// Parameters that govern a content item: its own arm when content is
    /// split, otherwise the first arm (arms agree on content knobs).
    pub fn content_params(&self, own: Option<ArmId>) -> &CompiledArm {
        match (self.design, own) {
            (None, _) => &self.base,
            (_, Some(a)) => &self.arms[a.0 as usize],
            (_, None) => &self.arms[0],
        }
    }

    /// Parameters that govern a fetch by a user of `arm` on `surface`.
    pub fn user_params(&self, arm: Option<ArmId>, surface: Surface) -> &CompiledArm {
        match arm {
            Some(a) if *self.surfaces.get(surface) => &self.arms[a.0 as usize],
            _ => &self.base,
        }
    }
}

/// A plan resolved for one run, with the metadata written to its log header.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub plan: CompiledPlan,
    pub meta: RunMeta,
}

/// Result of one simulation run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: SimSummary,
    pub meta: RunMeta,
    pub reports: RunReports,
}

pub fn prepare_run(scn: &ScenarioConfig, plan: Option<&ExperimentPlan>, seed: u64) -> Result<PreparedRun, SimError> {
    let compiled = match plan {
        Some(p) => CompiledPlan::compile(p, &scn.serving, scn.embedding.init, scn.embedding.model_fidelity)?,
        None => CompiledPlan::none(&scn.serving, scn.embedding.init, scn.embedding.model_fidelity),
    };
    let meta = RunMeta {
        seed,
        horizon: scn.population.horizon(),
        catalog: scn.population.catalog_contents,
        genres: scn.genres.iter().map(|g| g.name.clone()).collect(),
        design: compiled.design,
        arms: if compiled.design.is_some() { compiled.arms.iter().map(|a| a.label.clone()).collect() } else { vec![] },
        arm_weights: if compiled.design.is_some() { compiled.weights() } else { vec![] },
        experiment_surfaces: compiled.design.map(|_| compiled.surfaces),
        metrics: scn.metrics.clone(),
    };
    Ok(PreparedRun { plan: compiled, meta })
}

impl PreparedRun {
    /// Simulate, computing reports on the fly and forwarding events to `sink`.
    pub fn run<S: EventSink + ?Sized>(&self, scn: &ScenarioConfig, sink: &mut S) -> Result<RunOutput, SimError> {
        let mut collector = self.meta.collector();
        let summary = simulate(scn, &self.plan, self.meta.seed, &mut (&mut collector, sink))?;
        let reports = self.meta.reports(collector);
        Ok(RunOutput { summary, meta: self.meta.clone(), reports })
    }
}

/// One simulation run without an event sink.
pub fn run_scenario(scn: &ScenarioConfig, plan: Option<&ExperimentPlan>, seed: u64) -> Result<RunOutput, SimError> {
    prepare_run(scn, plan, seed)?.run(scn, &mut NullSink)
}

/// Replicate `r` draws a fresh arm assignment through its own salt.
pub fn replicate_plan(plan: &ExperimentPlan, r: u64) -> ExperimentPlan {
    ExperimentPlan { salt: format!("{}/r{r}", plan.salt), ..plan.clone() }
}

/// Seed of replicate `r` of a scenario seeded with `base`.
pub fn replicate_seed(base: u64, r: u64) -> u64 {
    base.wrapping_add(r)
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std =
        if xs.len() > 1 { Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()) } else { None };
    (Some(mean), std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub label: String,
    /// Mean over replicates; undefined if any replicate is undefined.
    pub mean: BTreeMap<String, Metric>,
    /// Sample standard deviation over replicates.
    pub std: BTreeMap<String, Metric>,
    /// Views attributed to this arm's users, per replicate.
    pub exposure: Vec<ArmExposure>,
    /// Share of all fresh-slot views taken by this arm's users, per replicate.
    pub fresh_share: Vec<Metric>,
    pub replicates: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub design: DesignKind,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
    pub global: Vec<MetricReport>,
    pub exposure: Vec<ExposureStats>,
}

fn summarize(reports: &[&MetricReport]) -> (BTreeMap<String, Metric>, BTreeMap<String, Metric>) {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    if let Some(first) = reports.first() {
        for key in first.scalars.keys() {
            let vals: Option<Vec<f64>> = reports.iter().map(|r| r.scalar(key)).collect();
            let (m, s) = vals.as_deref().map_or((None, None), mean_std);
            mean.insert(key.clone(), Metric(m));
            std.insert(key.clone(), Metric(s));
        }
    }
    (mean, std)
}

/// Run every replicate of a plan in parallel and aggregate per arm.
pub fn run_experiment(plan: &ExperimentPlan, base: &ScenarioConfig) -> Result<ExperimentResult, SimError> {
    plan.validate()?;
    let seeds: Vec<u64> = plan.replicates.iter().map(|&r| replicate_seed(base.seed, r)).collect();
    let runs: Vec<RunOutput> = plan
        .replicates
        .par_iter()
        .zip(&seeds)
        .map(|(&r, &seed)| run_scenario(base, Some(&replicate_plan(plan, r)), seed))
        .collect::<Result<_, _>>()?;
    let arms = plan
        .arms
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let reps: Vec<&MetricReport> = runs.iter().map(|r| &r.reports.arms[i]).collect();
            let (mean, std) = summarize(&reps);
            ArmReport {
                label: spec.label.clone(),
                mean,
                std,
                exposure: runs.iter().map(|r| r.reports.exposure.arms[i + 1].clone()).collect(),
                fresh_share: runs.iter().map(|r| Metric(r.reports.exposure.fresh_share(ArmId(i as u8)))).collect(),
                replicates: reps.into_iter().cloned().collect(),
            }
        })
        .collect();
    Ok(ExperimentResult {
        design: plan.design,
        seeds,
        arms,
        global: runs.iter().map(|r| r.reports.global.clone()).collect(),
        exposure: runs.into_iter().map(|r| r.reports.exposure).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub arm: String,
    pub baseline: String,
    pub mean: Metric,
    pub std: Metric,
    pub replicates: usize,
}

/// Per-replicate differences of every arm against the first arm.
pub fn arm_deltas(result: &ExperimentResult) -> Vec<DeltaRow> {
    let mut rows = Vec::new();
    let Some(base) = result.arms.first() else { return rows };
    for arm in &result.arms[1..] {
        for key in base.mean.keys() {
            let d: Vec<f64> = base
                .replicates
                .iter()
                .zip(&arm.replicates)
                .filter_map(|(b, a)| Some(a.scalar(key)? - b.scalar(key)?))
                .collect();
            let (mean, std) = mean_std(&d);
            rows.push(DeltaRow {
                metric: key.clone(),
                arm: arm.label.clone(),
                baseline: base.label.clone(),
                mean: Metric(mean),
                std: Metric(std),
                replicates: d.len(),
            });
        }
    }
    rows
}

/// Full-rollout counterfactuals: one single-arm run per treatment, same seeds.
pub fn ground_truth(plan: &ExperimentPlan, base: &ScenarioConfig) -> Result<Vec<ExperimentResult>, SimError> {
    plan.arms
        .iter()
        .map(|arm| {
            let truth = ExperimentPlan {
                design: DesignKind::FullRollout,
                arms: vec![ArmSpec { weight: 1.0, ..arm.clone() }],
                surfaces: None,
                ..plan.clone()
            };
            run_experiment(&truth, base)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub metric: String,
    pub arm: String,
    pub delta_hat: Metric,
    pub delta_truth: Metric,
    /// Mean over replicates of `|delta_hat - delta_truth|`.
    pub bias: Metric,
    pub bias_std: Metric,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub design: DesignKind,
    pub rows: Vec<BiasRow>,
    /// Metrics skipped because they were undefined somewhere.
    pub notices: Vec<String>,
}

impl BiasTable {
    pub fn get(&self, metric: &str, arm: &str) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.metric == metric && r.arm == arm)
    }
}

/// Compare experiment deltas with full-rollout deltas, replicate by replicate.
/// `truth[i]` is the full-rollout result for arm `i`.
pub fn estimate_bias(exp: &ExperimentResult, truth: &[ExperimentResult]) -> BiasTable {
    let mut rows = Vec::new();
    let mut notices = Vec::new();
    let Some(base) = exp.arms.first() else {
        return BiasTable { design: exp.design, rows, notices };
    };
    for (i, arm) in exp.arms.iter().enumerate().skip(1) {
        for key in base.mean.keys() {
            let mut hat = Vec::new();
            let mut tru = Vec::new();
            let mut bias = Vec::new();
            let mut undefined = false;
            for r in 0..exp.seeds.len() {
                let d_hat = arm.replicates[r].scalar(key).zip(base.replicates[r].scalar(key)).map(|(a, b)| a - b);
                let d_true = truth
                    .get(i)
                    .zip(truth.first())
                    .and_then(|(t1, t0)| Some(t1.global.get(r)?.scalar(key)? - t0.global.get(r)?.scalar(key)?));
                match (d_hat, d_true) {
                    (Some(h), Some(t)) => {
                        hat.push(h);
                        tru.push(t);
                        bias.push((h - t).abs());
                    }
                    _ => undefined = true,
                }
            }
            if undefined {
                notices.push(format!("{key} ({}): undefined in at least one replicate, skipped", arm.label));
                continue;
            }
            let (b, bs) = mean_std(&bias);
            rows.push(BiasRow {
                metric: key.clone(),
                arm: arm.label.clone(),
                delta_hat: Metric(mean_std(&hat).0),
                delta_truth: Metric(mean_std(&tru).0),
                bias: Metric(b),
                bias_std: Metric(bs),
                replicates: bias.len(),
            });
        }
    }
    BiasTable { design: exp.design, rows, notices }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRow {
    pub strategy: InitStrategy,
    pub auc: Metric,
    pub f1: f64,
    /// Relative AUC improvement over the baseline strategy, in percent.
    pub rela_impr: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub impressions: usize,
    pub positives: usize,
    pub baseline: InitStrategy,
    pub rows: Vec<OfflineRow>,
}

impl OfflineReport {
    pub fn row(&self, s: InitStrategy) -> Option<&OfflineRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }
}

/// Score a held-out log of autoplayed impressions of brand-new content by
/// `cos(user, initial embedding)` under each initialization strategy. The
/// label is a successful play.
pub fn offline_comparison(
    scn: &ScenarioConfig,
    seed: u64,
    impressions: usize,
    baseline: InitStrategy,
) -> Result<OfflineReport, SimError> {
    let world = World::generate(scn, seed)?;
    let index = seeded_genre_index(&world, scn, seed);
    let mut rng = stream_rng(seed, 7);
    let strategies = [InitStrategy::Random, InitStrategy::GenreAverage, InitStrategy::ModelBased];
    let mut init_rngs: Vec<_> = (0..strategies.len() as u64).map(|k| stream_rng(seed, 8 + k)).collect();
    let mut labels = Vec::with_capacity(impressions);
    let mut scores = vec![Vec::with_capacity(impressions); strategies.len()];
    for _ in 0..impressions {
        let user = &world.users[rng.random_range(0..world.users.len())];
        let draw = world.draw_content(&mut rng, scn);
        let aff = dot(&user.embedding, &draw.true_embedding).clamp(-1.0, 1.0);
        let watch = sample_watch(&mut rng, aff, 1.0, draw.duration_s, &scn.behavior);
        let outcome = classify_watch(watch, draw.duration_s).expect("watch within duration");
        labels.push(outcome == WatchOutcome::Successful);
        for (k, s) in strategies.iter().enumerate() {
            let est =
                initial_embedding(*s, scn.embedding.model_fidelity, &draw, &index, &mut init_rngs[k], &scn.embedding);
            scores[k].push((1.0 + cosine_similarity(&user.embedding, &est)) / 2.0);
        }
    }
    let aucs: Vec<Option<f64>> = scores.iter().map(|s| auc(s, &labels).expect("scores are finite")).collect();
    let base_auc = strategies.iter().position(|s| *s == baseline).and_then(|k| aucs[k]);
    let rows = strategies
        .iter()
        .enumerate()
        .map(|(k, s)| OfflineRow {
            strategy: *s,
            auc: Metric(aucs[k]),
            f1: f1_at(&scores[k], &labels, scn.metrics.f1_threshold).expect("non-empty input"),
            rela_impr: Metric(aucs[k].zip(base_auc).and_then(|(m, b)| rela_impr(m, b))),
        })
        .collect();
    Ok(OfflineReport { impressions, positives: labels.iter().filter(|&&l| l).count(), baseline, rows })
}
