//! Synthetic multi-scenario impression logs: configuration, generation,
//! the tab-separated record format, summary statistics and batching.

mod generate;
mod loader;
mod records;
mod stats;

pub use generate::{generate, Generated, GroundTruth};
pub use loader::{batch_indices, schema_for, Encoder};
pub use records::{read_records, read_records_from, write_records, write_records_to, Record};
pub use stats::{stats, ScenarioStats, Stats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A value given once for all scenarios or once per scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerScenario {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerScenario {
    pub fn resolve(&self, scenarios: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            PerScenario::Uniform(v) => Ok(vec![*v; scenarios]),
            PerScenario::Each(v) if v.len() == scenarios => Ok(v.clone()),
            PerScenario::Each(v) => Err(Error::Config(format!(
                "{name} lists {} values for {scenarios} scenarios",
                v.len()
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicMasks {
    /// Each scenario keeps a random half of the latent coordinates.
    #[default]
    Random,
    /// Scenario `s` keeps the half starting at offset `s · d_z / K` (wrapping).
    Contiguous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub users: usize,
    pub items: usize,
    pub scenarios: usize,
    pub contexts: usize,
    /// Days `1..days-1` are training days, day `days` is the test day.
    pub days: usize,
    pub latent_dim: usize,
    pub cold_start_ratio: PerScenario,
    pub behaviors_mean: f64,
    /// Gamma-Poisson overdispersion of the history length (0 gives Poisson).
    pub behaviors_dispersion: f64,
    /// History timestamps are drawn from days `1-history_days ..= 0`.
    pub history_days: usize,
    pub impressions_per_day: usize,
    pub temperature: f64,
    pub ctr_bias: PerScenario,
    pub profile_buckets: usize,
    /// Probability that an impression's user comes from the scenario's own pool.
    pub home_scenario_prob: f64,
    pub topic_masks: TopicMasks,
    /// Fields whose raw ids are hashed into `hash_buckets` buckets.
    pub hashed_fields: Vec<String>,
    pub hash_buckets: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            users: 20_000,
            items: 2_000,
            scenarios: 6,
            contexts: 4,
            days: 10,
            latent_dim: 16,
            cold_start_ratio: PerScenario::Each(vec![0.10, 0.16, 0.22, 0.28, 0.34, 0.40]),
            behaviors_mean: 20.0,
            behaviors_dispersion: 0.5,
            history_days: 30,
            impressions_per_day: 2_000,
            temperature: 1.0,
            ctr_bias: PerScenario::Each(vec![-1.0, -0.8, -1.2, -0.6, -1.4, -0.9]),
            profile_buckets: 8,
            home_scenario_prob: 0.8,
            topic_masks: TopicMasks::Random,
            hashed_fields: vec!["item_id".into()],
            hash_buckets: 4096,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("users", self.users),
            ("items", self.items),
            ("scenarios", self.scenarios),
            ("contexts", self.contexts),
            ("profile_buckets", self.profile_buckets),
            ("history_days", self.history_days),
            ("impressions_per_day", self.impressions_per_day),
            ("hash_buckets", self.hash_buckets),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.days < 2 {
            return Err(Error::Config("days must be at least 2 (training days plus a test day)".into()));
        }
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be at least 2".into()));
        }
        for r in self.cold_start_ratio.resolve(self.scenarios, "cold_start_ratio")? {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("cold_start_ratio {r} outside [0, 1]")));
            }
        }
        for b in self.ctr_bias.resolve(self.scenarios, "ctr_bias")? {
            if !b.is_finite() {
                return Err(Error::Config("ctr_bias must be finite".into()));
            }
        }
        if !(self.behaviors_mean >= 0.0 && self.behaviors_mean.is_finite()) {
            return Err(Error::Config("behaviors_mean must be finite and >= 0".into()));
        }
        if !(self.behaviors_dispersion >= 0.0 && self.behaviors_dispersion.is_finite()) {
            return Err(Error::Config("behaviors_dispersion must be finite and >= 0".into()));
        }
        if !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.home_scenario_prob) {
            return Err(Error::Config("home_scenario_prob must lie in [0, 1]".into()));
        }
        let grid = self.users.saturating_mul(self.items);
        if self.impressions_per_day > grid {
            return Err(Error::Config(format!(
                "infeasible: {} impressions per scenario per day exceed the {} user-item pairs",
                self.impressions_per_day, grid
            )));
        }
        if self.users < self.scenarios {
            return Err(Error::Config(format!(
                "infeasible: {} users cannot fill {} scenario pools",
                self.users, self.scenarios
            )));
        }
        Ok(())
    }

    pub fn test_day(&self) -> i64 {
        self.days as i64
    }
}
