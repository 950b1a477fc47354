//! Scenario files: one TOML document holding every knob of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::BehaviorParams;
use crate::domain::{GenreSpec, LifecycleConfig, Surface};
use crate::embeddings::EmbeddingConfig;
use crate::experiments::{CompiledPlan, ExperimentPlan};
use crate::metrics::MetricsConfig;
use crate::serving::ServingConfig;
use crate::sim::PopulationConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub write_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), write_log: true }
    }
}

/// Built-in genre table: three time-sensitive genres and five timeless ones.
pub fn default_genres() -> Vec<GenreSpec> {
    let g = |name: &str, prior: f64, half_life_h: Option<f64>, base_appeal: f64| GenreSpec {
        name: name.into(),
        prior,
        half_life_h,
        base_appeal,
    };
    vec![
        g("News", 0.10, Some(6.0), 0.9),
        g("Cricket", 0.10, Some(12.0), 0.9),
        g("Good Morning Wishes", 0.10, Some(24.0), 0.7),
        g("Devotion", 0.15, None, 0.8),
        g("Romance & Relationships", 0.12, None, 0.8),
        g("Humor & Fun", 0.18, None, 1.0),
        g("Music", 0.15, None, 0.9),
        g("Film", 0.10, None, 0.9),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Master seed. Required: runs never fall back to wall-clock seeding.
    pub seed: u64,
    #[serde(default)]
    pub population: PopulationConfig,
    #[serde(default = "default_genres")]
    pub genres: Vec<GenreSpec>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub behavior: BehaviorParams,
    #[serde(default)]
    pub serving: ServingConfig,
    #[serde(default)]
    pub lifecycle: LifecycleConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentPlan>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    /// All defaults with the given seed. Seeds above `i64::MAX` will not survive a TOML round trip.
    pub fn with_seed(seed: u64) -> Self {
        let mut s = load_scenario("seed = 0").expect("defaults are valid");
        s.seed = seed;
        s
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit in a signed 64-bit integer"));
        }
        let p = &self.population;
        if p.users == 0 {
            return Err(invalid("population.users", "must be positive"));
        }
        if !(p.contents_per_day >= 0.0) || !p.contents_per_day.is_finite() {
            return Err(invalid("population.contents_per_day", "must be a finite number >= 0"));
        }
        if !(p.days > 0.0) || p.days > 3_650.0 {
            return Err(invalid("population.days", "must be in (0, 3650]"));
        }
        if !(p.fetches_per_user_day >= 0.0) || !p.fetches_per_user_day.is_finite() {
            return Err(invalid("population.fetches_per_user_day", "must be a finite number >= 0"));
        }
        for (key, v) in [
            ("population.activity_spread", p.activity_spread),
            ("population.secondary_taste", p.secondary_taste),
            ("population.taste_noise", p.taste_noise),
            ("population.duration_spread", p.duration_spread),
            ("population.catalog_momentum", p.catalog_momentum),
        ] {
            if !(v >= 0.0) {
                return Err(invalid(key, "must be >= 0"));
            }
        }
        if !(p.duration_median_s > 0.0) {
            return Err(invalid("population.duration_median_s", "must be positive"));
        }

        if self.genres.is_empty() {
            return Err(invalid("genres", "at least one genre is required"));
        }
        if self.genres.len() > u16::MAX as usize {
            return Err(invalid("genres", "too many genres"));
        }
        let total: f64 = self.genres.iter().map(|g| g.prior).sum();
        if self.genres.iter().any(|g| !(g.prior >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid("genres.prior", format!("priors must be non-negative and sum to 1, got {total}")));
        }
        for (i, g) in self.genres.iter().enumerate() {
            if g.name.is_empty() || g.name.contains(['\t', '\n']) {
                return Err(invalid("genres.name", "names must be non-empty without tabs or newlines"));
            }
            if self.genres[..i].iter().any(|o| o.name == g.name) {
                return Err(invalid("genres.name", format!("duplicate genre `{}`", g.name)));
            }
            if g.half_life_h.is_some_and(|h| !(h > 0.0)) {
                return Err(invalid("genres.half_life_h", format!("`{}`: half-life must be positive", g.name)));
            }
            if !(0.0..=1.0).contains(&g.base_appeal) {
                return Err(invalid("genres.base_appeal", format!("`{}`: must be in [0, 1]", g.name)));
            }
        }

        let e = &self.embedding;
        if e.dim < 2 {
            return Err(invalid("embedding.dim", "must be at least 2"));
        }
        if !(e.sigma >= 0.0) {
            return Err(invalid("embedding.sigma", "must be >= 0"));
        }
        if !(e.eta0 > 0.0 && e.eta0 <= 1.0) {
            return Err(invalid("embedding.eta0", "must be in (0, 1]"));
        }
        if !(e.k0 > 0.0) {
            return Err(invalid("embedding.k0", "must be positive"));
        }
        if !(e.noise_scale >= 0.0) {
            return Err(invalid("embedding.noise_scale", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&e.model_fidelity) {
            return Err(invalid("embedding.model_fidelity", "must be in [0, 1]"));
        }
        if e.plays_per_update == 0 {
            return Err(invalid("embedding.plays_per_update", "must be positive"));
        }
        if !(0.0..=1.0).contains(&e.genre_coherence) {
            return Err(invalid("embedding.genre_coherence", "must be in [0, 1]"));
        }

        let b = &self.behavior;
        if !(b.watch_base > 0.0 && b.watch_base < 1.0) {
            return Err(invalid("behavior.watch_base", "must be in (0, 1)"));
        }
        if !(b.watch_concentration > 0.0) {
            return Err(invalid("behavior.watch_concentration", "must be positive"));
        }
        if !(b.affinity_gain > 0.0) {
            return Err(invalid("behavior.affinity_gain", "must be positive"));
        }

        let s = &self.serving;
        if s.views_min == 0 {
            return Err(invalid("serving.views_min", "must be positive"));
        }
        if !(s.latency_target_h > 0.0) {
            return Err(invalid("serving.latency_target_h", "must be positive"));
        }
        for surface in Surface::ALL {
            if *s.page_size.get(surface) > u8::MAX as u32 {
                return Err(invalid(&format!("serving.page_size.{surface}"), "must be at most 255"));
            }
            if s.fresh_slots.get(surface) > s.page_size.get(surface) {
                return Err(invalid(
                    &format!("serving.fresh_slots.{surface}"),
                    format!("exceeds serving.page_size.{surface}"),
                ));
            }
        }
        let mix: f64 = s.surface_mix.iter().map(|(_, v)| *v).sum();
        if s.surface_mix.iter().any(|(_, v)| !(*v >= 0.0)) || (mix - 1.0).abs() > 1e-9 {
            return Err(invalid("serving.surface_mix", format!("must be non-negative and sum to 1, got {mix}")));
        }
        if !(0.0..=1.0).contains(&s.epsilon) {
            return Err(invalid("serving.epsilon", "must be in [0, 1]"));
        }
        if !(s.overdue_boost >= 1.0) {
            return Err(invalid("serving.overdue_boost", "must be >= 1"));
        }
        if s.fresh_shortlist == 0 {
            return Err(invalid("serving.fresh_shortlist", "must be positive"));
        }
        if !(s.home_scan_mean >= 0.0) {
            return Err(invalid("serving.home_scan_mean", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&s.scroll_stop_prob) {
            return Err(invalid("serving.scroll_stop_prob", "must be in [0, 1]"));
        }
        if !(s.momentum_half_life_h > 0.0) {
            return Err(invalid("serving.momentum_half_life_h", "must be positive"));
        }
        if !(s.momentum_prior >= 0.0) {
            return Err(invalid("serving.momentum_prior", "must be >= 0"));
        }
        if let Some(t) = &s.throttle {
            if !(0.0..=1.0).contains(&t.fraction) {
                return Err(invalid("serving.throttle.fraction", "must be in [0, 1]"));
            }
            if !(t.latency_h_min > 0.0 && t.latency_h_max >= t.latency_h_min) {
                return Err(invalid("serving.throttle.latency_h_min", "need 0 < latency_h_min <= latency_h_max"));
            }
        }

        let l = &self.lifecycle;
        if !(0.0..=2.0).contains(&l.tau) {
            return Err(invalid("lifecycle.tau", "must be in [0, 2]"));
        }
        if !(l.ttl_h > 0.0) {
            return Err(invalid("lifecycle.ttl_h", "must be positive"));
        }
        if !(l.activity_window_h >= 0.0) {
            return Err(invalid("lifecycle.activity_window_h", "must be >= 0"));
        }

        self.metrics.validate().map_err(|e| invalid("metrics", e.to_string()))?;

        if let Some(plan) = &self.experiment {
            CompiledPlan::compile(plan, &self.serving, self.embedding.init, self.embedding.model_fidelity)
                .map_err(|e| invalid("experiment", e.to_string()))?;
        }
        Ok(())
    }

    /// Override one knob by dotted path, e.g. `serving.views_min` = `200`.
    /// The value is parsed as a TOML value; the result is re-validated.
    pub fn with_knob(&self, path: &str, raw: &str) -> Result<ScenarioConfig, ConfigError> {
        let mut root = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map_err(|e| invalid(path, format!("cannot parse value `{raw}`: {e}")))?
            .remove("v")
            .expect("parsed key");
        let parts: Vec<&str> = path.split('.').collect();
        let (last, parents) = parts.split_last().ok_or_else(|| invalid(path, "empty knob path"))?;
        let mut table = &mut root;
        for (i, key) in parents.iter().enumerate() {
            table = table
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| invalid(&parts[..=i].join("."), "not a table"))?;
        }
        table.insert(last.to_string(), value);
        let text = toml::to_string(&root).map_err(|e| ConfigError::Parse(e.to_string()))?;
        load_scenario(&text).map_err(|e| match e {
            ConfigError::Parse(m) => invalid(path, m),
            other => other,
        })
    }
}

/// Parse and validate a scenario. Unknown keys are rejected.
pub fn load_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let scn: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
    scn.validate()?;
    Ok(scn)
}

pub fn load_scenario_file(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
    load_scenario(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let scn = load_scenario("seed = 7").unwrap();
        assert_eq!(scn.seed, 7);
        assert_eq!(scn.serving, ServingConfig::default());
        assert_eq!(scn.genres, default_genres());
        assert!(scn.experiment.is_none());
    }

    #[test]
    fn missing_seed_is_rejected() {
        let err = load_scenario("[serving]\nviews_min = 10").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load_scenario("seed = 1\nbogus = 2").is_err());
        assert!(load_scenario("seed = 1\n[serving]\nviews_minimum = 2").is_err());
    }

    #[test]
    fn priors_must_sum_to_one() {
        let text = r#"
seed = 1
[[genres]]
name = "a"
prior = 0.5
base_appeal = 1.0
[[genres]]
name = "b"
prior = 0.4
base_appeal = 1.0
"#;
        let err = load_scenario(text).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "genres.prior"), "{err}");
    }

    #[test]
    fn fresh_slots_bounded_by_page() {
        let err = load_scenario("seed = 1\n[serving.fresh_slots]\nhome = 13\ngrid = 4\nscroll = 2").unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "serving.fresh_slots.home"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut scn = ScenarioConfig::with_seed(3);
        scn.serving.throttle =
            Some(crate::serving::Throttle { fraction: 0.3, latency_h_min: 60.0, latency_h_max: 120.0 });
        let again = load_scenario(&scn.to_toml()).unwrap();
        assert_eq!(scn, again);
    }

    #[test]
    fn knob_override() {
        let scn = ScenarioConfig::with_seed(3);
        let s2 = scn.with_knob("serving.views_min", "200").unwrap();
        assert_eq!(s2.serving.views_min, 200);
        let s3 = scn.with_knob("serving.fresh_slots.home", "5").unwrap();
        assert_eq!(s3.serving.fresh_slots.home, 5);
        assert!(scn.with_knob("serving.views_min", "0").is_err());
        assert!(scn.with_knob("serving.nope", "1").is_err());
        assert!(scn.with_knob("seed.x", "1").is_err());
    }
}
