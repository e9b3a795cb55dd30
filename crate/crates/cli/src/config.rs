//! Run configuration: one JSON document, every section optional, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use bednet_core::inference::PriorSpec;
use bednet_core::io::PanelPaths;
use bednet_core::policy::UtilityKind;
use bednet_core::rollout::{RiskFactor, RolloutConfig};
use bednet_core::search::SearchSpace;
use bednet_core::study::StudySettings;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub policy: PolicySection,
    pub search: SearchSection,
    pub rollout: RolloutSection,
    pub seed: u64,
    pub study: StudySettings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub zones: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    /// Posterior draws CSV written by `fit`.
    pub posterior: Option<PathBuf>,
    /// Latent CSV written by `fit`; defaults to `latent.csv` beside the posterior.
    pub latent: Option<PathBuf>,
    /// Policy JSON written by `optimize`.
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub prior: PriorSpec,
    pub n_iter: usize,
    pub burn_in: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { prior: PriorSpec::default(), n_iter: 5000, burn_in: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub utility_kind: UtilityKind,
    pub factors: Vec<RiskFactor>,
    pub budget: f64,
    pub zero_floor: Option<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            utility_kind: UtilityKind::Linear,
            factors: vec![RiskFactor::Covariate(0), RiskFactor::CurrentRate, RiskFactor::NeighborRate],
            budget: 0.5,
            zero_floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub alpha_bound: f64,
    pub alpha0_max: f64,
    pub n_initial: usize,
    pub n_sequential: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchSpace::new(1);
        Self { alpha_bound: s.alpha_bound, alpha0_max: s.alpha0_max, n_initial: s.n_initial, n_sequential: s.n_sequential }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub horizon: usize,
    pub n_rollouts: usize,
    /// Posterior draws kept for rollouts; all kept draws when absent.
    pub posterior_draws: Option<usize>,
    pub disable_noise: bool,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self { horizon: 5, n_rollouts: 200, posterior_draws: None, disable_noise: false }
    }
}

/// Configuration problems; the CLI maps these to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Reads a config file. Relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.zones,
            &mut cfg.data.adjacency,
            &mut cfg.data.observations,
            &mut cfg.data.posterior,
            &mut cfg.data.latent,
            &mut cfg.data.policy,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn panel_paths(&self) -> Result<PanelPaths, ConfigError> {
        let need = |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| ConfigError(format!("config is missing data.{key}")));
        Ok(PanelPaths {
            zones: need(&self.data.zones, "zones")?,
            adjacency: need(&self.data.adjacency, "adjacency")?,
            observations: need(&self.data.observations, "observations")?,
        })
    }

    pub fn search_space(&self) -> SearchSpace {
        SearchSpace {
            q: self.policy.factors.len(),
            alpha_bound: self.search.alpha_bound,
            alpha0_max: self.search.alpha0_max,
            n_initial: self.search.n_initial,
            n_sequential: self.search.n_sequential,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            horizon: self.rollout.horizon,
            n_rollouts: self.rollout.n_rollouts,
            budget: self.policy.budget,
            factors: self.policy.factors.clone(),
            seed: self.seed,
            zero_floor: self.policy.zero_floor,
            disable_noise: self.rollout.disable_noise,
        }
    }

    /// Checks every section that does not depend on data files.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |e: bednet_core::Error| ConfigError(e.to_string());
        self.model.prior.validate().map_err(err)?;
        if self.model.n_iter == 0 || self.model.burn_in >= self.model.n_iter {
            return Err(ConfigError(format!(
                "model.burn_in ({}) must be below model.n_iter ({})",
                self.model.burn_in, self.model.n_iter
            )));
        }
        if let Some(z) = self.policy.zero_floor {
            if !(0.0..=1.0).contains(&z) {
                return Err(ConfigError(format!("policy.zero_floor {z} is outside [0, 1]")));
            }
        }
        if self.rollout.posterior_draws == Some(0) {
            return Err(ConfigError("rollout.posterior_draws must be positive".into()));
        }
        self.rollout_config().validate().map_err(err)?;
        self.search_space().validate().map_err(err)?;
        Ok(())
    }
}
