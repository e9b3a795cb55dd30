//! Simulation study: simulate a panel, fit it, optimize both utility kinds,
//! then score all four policies by forward simulation under the generator
//! that produced the data.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_panel, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::inference::{gibbs_fit, thin_draws, GibbsConfig, PriorSpec};
use crate::policy::{Baseline, PolicyParams, UtilityKind};
use crate::rollout::{improvement, rollout_draws, LossEstimate, RiskFactor, RolloutConfig, RolloutDraw, RolloutEngine, Rule};
use crate::search::{optimize_with_engine, SearchSpace};
use crate::stats::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    pub scenario: ScenarioKind,
    pub replicates: usize,
    pub budgets: Vec<f64>,
    pub prior: PriorSpec,
    pub n_iter: usize,
    pub burn_in: usize,
    pub factors: Vec<RiskFactor>,
    pub horizon: usize,
    /// Rollouts per loss evaluation during the search.
    pub n_rollouts: usize,
    /// Posterior draws kept for rollouts (uniformly thinned).
    pub rollout_draws: usize,
    /// Rollouts under the true generator when scoring policies.
    pub eval_rollouts: usize,
    pub zero_floor: Option<f64>,
    pub alpha_bound: f64,
    pub alpha0_max: f64,
    pub n_initial: usize,
    pub n_sequential: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::CorrectSpec,
            replicates: 20,
            budgets: vec![0.5],
            prior: PriorSpec::default(),
            n_iter: 2000,
            burn_in: 500,
            factors: vec![RiskFactor::Covariate(0), RiskFactor::CurrentRate, RiskFactor::NeighborRate],
            horizon: 5,
            n_rollouts: 200,
            rollout_draws: 200,
            eval_rollouts: 1000,
            zero_floor: None,
            alpha_bound: 5.0,
            alpha0_max: 1.0,
            n_initial: 100,
            n_sequential: 20,
        }
    }
}

impl StudySettings {
    pub fn search_space(&self) -> SearchSpace {
        SearchSpace {
            q: self.factors.len(),
            alpha_bound: self.alpha_bound,
            alpha0_max: self.alpha0_max,
            n_initial: self.n_initial,
            n_sequential: self.n_sequential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Invalid("study needs at least one replicate".into()));
        }
        if self.budgets.is_empty() {
            return Err(Error::Invalid("study needs at least one budget level".into()));
        }
        for &c in &self.budgets {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Domain { name: "budget", value: c, domain: "[0, 1]" });
            }
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Invalid(format!("burn-in {} must be below the iteration count {}", self.burn_in, self.n_iter)));
        }
        if self.rollout_draws == 0 || self.eval_rollouts == 0 {
            return Err(Error::Invalid("rollout counts must be positive".into()));
        }
        self.prior.validate()?;
        self.search_space().validate()?;
        RolloutConfig { horizon: self.horizon, n_rollouts: self.n_rollouts, ..RolloutConfig::new(0.5, self.factors.clone(), 0) }.validate()
    }
}

/// The four policies compared in the study, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyPolicy {
    Linear,
    Quadratic,
    HighestRate,
    Even,
}

impl StudyPolicy {
    pub const ALL: [StudyPolicy; 4] = [Self::Linear, Self::Quadratic, Self::HighestRate, Self::Even];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Quadratic => "quadratic",
            Self::HighestRate => "highest_rate",
            Self::Even => "even",
        }
    }
}

/// Outcome of one replicate at one budget level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub budget: f64,
    /// Indexed like [`StudyPolicy::ALL`].
    pub losses: [LossEstimate; 4],
    pub linear_policy: PolicyParams,
    pub quadratic_policy: PolicyParams,
}

impl ReplicateResult {
    pub fn loss(&self, policy: StudyPolicy) -> f64 {
        self.losses[policy as usize].mean
    }

    /// `(policy, baseline, improvement)` for both optimized policies
    /// against both baselines.
    pub fn improvements(&self) -> Result<Vec<(StudyPolicy, StudyPolicy, f64)>> {
        let mut out = Vec::with_capacity(4);
        for p in [StudyPolicy::Linear, StudyPolicy::Quadratic] {
            for b in [StudyPolicy::HighestRate, StudyPolicy::Even] {
                out.push((p, b, improvement(self.loss(b), self.loss(p))?));
            }
        }
        Ok(out)
    }

    pub fn improvement(&self, policy: StudyPolicy, baseline: StudyPolicy) -> Result<f64> {
        improvement(self.loss(baseline), self.loss(policy))
    }
}

/// Seed for stage `stage` of replicate `replicate`.
pub fn stage_seed(seed: u64, replicate: usize, stage: u64) -> u64 {
    substream(seed, (replicate as u64) << 8 | stage).next_u64()
}

/// Runs one replicate for every configured budget.
pub fn run_replicate(settings: &StudySettings, seed: u64, replicate: usize) -> Result<Vec<ReplicateResult>> {
    let spec = ScenarioSpec::standard(settings.scenario);
    let sim = simulate_panel(&spec, stage_seed(seed, replicate, 0))?;
    let data = &sim.data;
    let fit = gibbs_fit(
        data,
        &settings.prior,
        GibbsConfig { n_iter: settings.n_iter, burn_in: settings.burn_in, seed: stage_seed(seed, replicate, 1) },
    )?;
    let kept = thin_draws(&fit, settings.rollout_draws.min(fit.n_kept()), stage_seed(seed, replicate, 2))?;
    let starts = rollout_draws(&kept)?;
    let t = sim.latent.ncols() - 1;
    let truth = RolloutDraw {
        params: spec.params.clone(),
        quadratic_allocation: spec.quadratic_allocation,
        eta_last: sim.latent.column(t).iter().copied().collect(),
        eta_prev: sim.latent.column(t - 1).iter().copied().collect(),
    };
    let space = settings.search_space();
    let mut out = Vec::with_capacity(settings.budgets.len());
    for &budget in &settings.budgets {
        let config = RolloutConfig {
            horizon: settings.horizon,
            n_rollouts: settings.n_rollouts,
            budget,
            factors: settings.factors.clone(),
            seed: stage_seed(seed, replicate, 3),
            zero_floor: settings.zero_floor,
            disable_noise: false,
        };
        let engine = RolloutEngine::new(&data.graph, &data.covariates, &starts, config.clone())?;
        let search_seed = stage_seed(seed, replicate, 4);
        let (linear, _) = optimize_with_engine(&engine, UtilityKind::Linear, &space, search_seed)?;
        let (quadratic, _) = optimize_with_engine(&engine, UtilityKind::Quadratic, &space, search_seed)?;

        let eval = RolloutConfig { n_rollouts: settings.eval_rollouts, seed: stage_seed(seed, replicate, 5), ..config };
        let judge = RolloutEngine::new(&data.graph, &data.covariates, std::slice::from_ref(&truth), eval)?;
        let losses = [
            judge.estimate(Rule::Policy(&linear))?,
            judge.estimate(Rule::Policy(&quadratic))?,
            judge.estimate(Rule::Fixed(Baseline::HighestRate))?,
            judge.estimate(Rule::Fixed(Baseline::Even))?,
        ];
        out.push(ReplicateResult { replicate, budget, losses, linear_policy: linear, quadratic_policy: quadratic });
    }
    Ok(out)
}

/// Runs every replicate on a pool of `jobs` threads. `on_replicate` sees each
/// replicate's results as soon as they exist; the returned vector is ordered
/// by replicate then budget.
pub fn run_study<F>(settings: &StudySettings, seed: u64, jobs: usize, on_replicate: F) -> Result<Vec<ReplicateResult>>
where
    F: Fn(&[ReplicateResult]) + Sync,
{
    settings.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Vec<ReplicateResult>> = pool.install(|| {
        (0..settings.replicates)
            .into_par_iter()
            .map(|r| {
                let res = run_replicate(settings, seed, r)?;
                on_replicate(&res);
                Ok(res)
            })
            .collect::<Result<_>>()
    })?;
    Ok(results.into_iter().flatten().collect())
}

/// Median of one improvement series across replicates at one budget.
pub fn median_improvement(results: &[ReplicateResult], budget: f64, policy: StudyPolicy, baseline: StudyPolicy) -> Result<f64> {
    let values = results
        .iter()
        .filter(|r| r.budget == budget)
        .map(|r| r.improvement(policy, baseline))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::InsufficientData(format!("no replicates at budget {budget}")));
    }
    Ok(crate::stats::median(&values))
}
