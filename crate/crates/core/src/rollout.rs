//! Monte Carlo value of a policy: expected mean prevalence over a future
//! horizon, estimated by simulating forward from posterior draws.
//!
//! Rollout `i` uses posterior draw `i mod D` and its own random stream
//! derived from the configured seed, so two policies evaluated with the same
//! configuration face identical draws and noise.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_measure, Dynamics, DynamicsParams, Noise, PanelData};
use crate::error::{Error, Result};
use crate::graph::ZoneGraph;
use crate::inference::{PosteriorDraw, PosteriorDraws};
use crate::policy::{allocate, priority_scores, zero_floor_mask, Allocation, Baseline, PolicyParams, RiskFactors};
use crate::stats::{inv_logit, mean, sample_sd, substream};

/// One column of the risk-factor matrix, computed from the current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RiskFactor {
    /// Covariate column `k` (0-based internally, written 1-based).
    Covariate(usize),
    /// Current logit prevalence.
    CurrentRate,
    /// Neighbour mean of the current logit prevalence.
    NeighborRate,
    /// Change in logit prevalence over the last year.
    RateGradient,
}

impl fmt::Display for RiskFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskFactor::Covariate(k) => write!(f, "covariate:{}", k + 1),
            RiskFactor::CurrentRate => f.write_str("current_rate"),
            RiskFactor::NeighborRate => f.write_str("neighbor_rate"),
            RiskFactor::RateGradient => f.write_str("rate_gradient"),
        }
    }
}

impl FromStr for RiskFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current_rate" => Ok(Self::CurrentRate),
            "neighbor_rate" => Ok(Self::NeighborRate),
            "rate_gradient" => Ok(Self::RateGradient),
            _ => {
                let k = s
                    .strip_prefix("covariate:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::Invalid(format!("unknown risk factor {s:?}")))?;
                Ok(Self::Covariate(k - 1))
            }
        }
    }
}

impl TryFrom<String> for RiskFactor {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RiskFactor> for String {
    fn from(f: RiskFactor) -> String {
        f.to_string()
    }
}

/// Builds the risk factors for one decision epoch from the current and
/// previous logit prevalence.
pub fn build_risk_factors(
    spec: &[RiskFactor],
    graph: &ZoneGraph,
    covariates: &DMatrix<f64>,
    current: &[f64],
    previous: &[f64],
) -> Result<RiskFactors> {
    let n = graph.n_zones();
    let mut values = DMatrix::zeros(n, spec.len());
    let nbr = graph.neighbor_mean(current);
    for (k, factor) in spec.iter().enumerate() {
        for l in 0..n {
            values[(l, k)] = match *factor {
                RiskFactor::Covariate(c) => {
                    if c >= covariates.ncols() {
                        return Err(Error::Invalid(format!(
                            "risk factor {factor} references a missing covariate ({} available)",
                            covariates.ncols()
                        )));
                    }
                    covariates[(l, c)]
                }
                RiskFactor::CurrentRate => current[l],
                RiskFactor::NeighborRate => nbr[l],
                RiskFactor::RateGradient => current[l] - previous[l],
            };
        }
    }
    RiskFactors::new(values, spec.iter().map(|f| f.to_string()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub n_rollouts: usize,
    pub budget: f64,
    pub factors: Vec<RiskFactor>,
    pub seed: u64,
    /// Zones whose current prevalence is below this receive nothing.
    pub zero_floor: Option<f64>,
    /// Replaces every innovation and measurement error by zero.
    pub disable_noise: bool,
}

impl RolloutConfig {
    pub fn new(budget: f64, factors: Vec<RiskFactor>, seed: u64) -> Self {
        Self { horizon: 5, n_rollouts: 200, budget, factors, seed, zero_floor: None, disable_noise: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Invalid("rollout horizon must be at least 1".into()));
        }
        if self.n_rollouts == 0 {
            return Err(Error::Invalid("at least one rollout is required".into()));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(Error::Domain { name: "budget", value: self.budget, domain: "[0, 1]" });
        }
        if self.factors.is_empty() {
            return Err(Error::Invalid("at least one risk factor is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub mean: f64,
    /// Sample standard deviation over rollouts divided by `√n`; 0 for one rollout.
    pub std_error: f64,
    pub n_rollouts: usize,
    /// Set when a single rollout makes the standard error meaningless.
    pub degenerate: bool,
}

impl LossEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        Self {
            mean: mean(samples),
            std_error: if n > 1 { sample_sd(samples) / (n as f64).sqrt() } else { 0.0 },
            n_rollouts: n,
            degenerate: n < 2,
        }
    }
}

/// Starting point of a rollout: a dynamics model and the last two latent years.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutDraw {
    pub params: DynamicsParams,
    /// `a²` coefficient; nonzero only for the misspecified generator.
    pub quadratic_allocation: f64,
    pub eta_last: Vec<f64>,
    pub eta_prev: Vec<f64>,
}

impl RolloutDraw {
    pub fn from_posterior(draw: &PosteriorDraw) -> Result<Self> {
        let eta_last = draw.latent_from_end(0).ok_or_else(|| Error::Invalid("posterior draw has no latent field".into()))?;
        let eta_prev = draw.latent_from_end(1).unwrap_or_else(|| eta_last.clone());
        Ok(Self { params: draw.params.clone(), quadratic_allocation: 0.0, eta_last, eta_prev })
    }
}

pub fn rollout_draws(draws: &PosteriorDraws) -> Result<Vec<RolloutDraw>> {
    draws.draws.iter().map(RolloutDraw::from_posterior).collect()
}

/// What decides the allocation at each epoch.
#[derive(Debug, Clone, Copy)]
pub enum Rule<'a> {
    Policy(&'a PolicyParams),
    Fixed(Baseline),
}

struct Start<'g> {
    dynamics: Dynamics<'g>,
    eta_last: Vec<f64>,
    eta_prev: Vec<f64>,
}

/// Prepared rollout simulator: factored innovation precisions for every
/// draw, graph and covariates.
pub struct RolloutEngine<'g> {
    graph: &'g ZoneGraph,
    covariates: &'g DMatrix<f64>,
    starts: Vec<Start<'g>>,
    config: RolloutConfig,
}

impl<'g> RolloutEngine<'g> {
    pub fn new(graph: &'g ZoneGraph, covariates: &'g DMatrix<f64>, draws: &[RolloutDraw], config: RolloutConfig) -> Result<Self> {
        config.validate()?;
        if draws.is_empty() {
            return Err(Error::InsufficientData("no posterior draws for rollouts".into()));
        }
        let n = graph.n_zones();
        let starts = draws
            .iter()
            .map(|d| {
                if d.eta_last.len() != n || d.eta_prev.len() != n {
                    return Err(Error::Dimension { context: "rollout start state", expected: n, got: d.eta_last.len() });
                }
                Ok(Start {
                    dynamics: Dynamics::new(graph, d.params.clone())?.with_quadratic_allocation(d.quadratic_allocation),
                    eta_last: d.eta_last.clone(),
                    eta_prev: d.eta_prev.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // fail early on a factor referencing a missing covariate
        build_risk_factors(&config.factors, graph, covariates, &starts[0].eta_last, &starts[0].eta_prev)?;
        Ok(Self { graph, covariates, starts, config })
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.config
    }

    pub fn n_draws(&self) -> usize {
        self.starts.len()
    }

    /// Allocation chosen by `rule` in state `(current, previous)`.
    pub fn decide(&self, rule: Rule<'_>, current: &[f64], previous: &[f64]) -> Result<Allocation> {
        let cfg = &self.config;
        match rule {
            Rule::Fixed(baseline) => {
                let rates: Vec<f64> = current.iter().map(|&v| inv_logit(v)).collect();
                baseline.allocate(&rates, self.graph, cfg.budget)
            }
            Rule::Policy(policy) => {
                let factors = build_risk_factors(&cfg.factors, self.graph, self.covariates, current, previous)?;
                let scores = priority_scores(&factors, &policy.alpha)?;
                let mask = cfg.zero_floor.map(|thr| {
                    let rates: Vec<f64> = current.iter().map(|&v| inv_logit(v)).collect();
                    zero_floor_mask(&rates, thr)
                });
                allocate(&scores, policy, self.graph, cfg.budget, mask.as_deref())
            }
        }
    }

    /// Mean prevalence over zones and years along rollout `i`.
    pub fn rollout(&self, rule: Rule<'_>, i: usize) -> Result<f64> {
        let start = &self.starts[i % self.starts.len()];
        let mut rng = substream(self.config.seed, i as u64);
        let sigma_e2 = start.dynamics.params().sigma_e2;
        let mut current = start.eta_last.clone();
        let mut previous = start.eta_prev.clone();
        let mut total = 0.0;
        for _ in 0..self.config.horizon {
            let a = self.decide(rule, &current, &previous)?;
            let (next, observed) = if self.config.disable_noise {
                let next = start.dynamics.step(&current, &a.0, self.covariates, Noise::Zero)?;
                let observed = next.clone();
                (next, observed)
            } else {
                let next = start.dynamics.step(&current, &a.0, self.covariates, Noise::Sample(&mut rng))?;
                let observed = step_measure(&next, sigma_e2, Noise::Sample(&mut rng))?;
                (next, observed)
            };
            total += observed.iter().map(|&v| inv_logit(v)).sum::<f64>();
            previous = std::mem::replace(&mut current, next);
        }
        Ok(total / (self.graph.n_zones() * self.config.horizon) as f64)
    }

    /// Loss estimate over all configured rollouts; deterministic regardless
    /// of thread scheduling.
    pub fn estimate(&self, rule: Rule<'_>) -> Result<LossEstimate> {
        if let Rule::Policy(p) = rule {
            if p.alpha.len() != self.config.factors.len() {
                return Err(Error::Dimension { context: "policy weights", expected: self.config.factors.len(), got: p.alpha.len() });
            }
        }
        let samples = (0..self.config.n_rollouts)
            .into_par_iter()
            .map(|i| self.rollout(rule, i))
            .collect::<Result<Vec<f64>>>()?;
        Ok(LossEstimate::from_samples(&samples))
    }
}

/// Loss of a utility-based policy under the posterior predictive.
pub fn estimate_loss(policy: &PolicyParams, draws: &PosteriorDraws, data: &PanelData, config: &RolloutConfig) -> Result<LossEstimate> {
    let starts = rollout_draws(draws)?;
    RolloutEngine::new(&data.graph, &data.covariates, &starts, config.clone())?.estimate(Rule::Policy(policy))
}

/// Loss of a fixed baseline policy under the posterior predictive.
pub fn estimate_loss_fixed_policy(
    baseline: Baseline,
    draws: &PosteriorDraws,
    data: &PanelData,
    config: &RolloutConfig,
) -> Result<LossEstimate> {
    let starts = rollout_draws(draws)?;
    RolloutEngine::new(&data.graph, &data.covariates, &starts, config.clone())?.estimate(Rule::Fixed(baseline))
}

/// Relative improvement `(baseline − policy)/baseline`.
pub fn improvement(baseline: f64, policy: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Domain { name: "baseline loss", value: baseline, domain: "(0, inf)" });
    }
    Ok((baseline - policy) / baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::UtilityKind;

    fn two_zone() -> (ZoneGraph, DMatrix<f64>) {
        let g = ZoneGraph::new(vec!["a".into(), "b".into()], vec![1.0, 1.0], &[(0, 1)]).unwrap();
        (g, DMatrix::zeros(2, 1))
    }

    fn start() -> RolloutDraw {
        RolloutDraw {
            params: DynamicsParams::simulation_truth(),
            quadratic_allocation: 0.0,
            eta_last: vec![0.0, 0.0],
            eta_prev: vec![0.0, 0.0],
        }
    }

    fn noiseless(budget: f64) -> RolloutConfig {
        RolloutConfig {
            horizon: 1,
            n_rollouts: 3,
            disable_noise: true,
            ..RolloutConfig::new(budget, vec![RiskFactor::CurrentRate], 0)
        }
    }

    #[test]
    fn factor_names_round_trip() {
        for f in [RiskFactor::Covariate(1), RiskFactor::CurrentRate, RiskFactor::NeighborRate, RiskFactor::RateGradient] {
            assert_eq!(f.to_string().parse::<RiskFactor>().unwrap(), f);
        }
        assert!("covariate:0".parse::<RiskFactor>().is_err());
        assert!("temperature".parse::<RiskFactor>().is_err());
    }

    #[test]
    fn noiseless_single_step_values() {
        let (g, x) = two_zone();
        let policy = PolicyParams::new(0.0, vec![1.0], UtilityKind::Linear).unwrap();
        let full = RolloutEngine::new(&g, &x, &[start()], noiseless(1.0)).unwrap();
        let loss = full.estimate(Rule::Policy(&policy)).unwrap();
        assert!((loss.mean - inv_logit(-0.5)).abs() < 1e-12);
        let none = RolloutEngine::new(&g, &x, &[start()], noiseless(0.0)).unwrap();
        let loss = none.estimate(Rule::Policy(&policy)).unwrap();
        assert!((loss.mean - inv_logit(0.2)).abs() < 1e-12);
        assert_eq!(loss.std_error, 0.0);
    }

    #[test]
    fn missing_covariate_is_reported() {
        let (g, x) = two_zone();
        let cfg = RolloutConfig::new(0.5, vec![RiskFactor::Covariate(3)], 0);
        assert!(RolloutEngine::new(&g, &x, &[start()], cfg).is_err());
    }

    #[test]
    fn single_rollout_is_degenerate() {
        let (g, x) = two_zone();
        let cfg = RolloutConfig { n_rollouts: 1, ..RolloutConfig::new(0.5, vec![RiskFactor::CurrentRate], 4) };
        let loss = RolloutEngine::new(&g, &x, &[start()], cfg).unwrap().estimate(Rule::Fixed(Baseline::Even)).unwrap();
        assert!(loss.degenerate);
        assert_eq!(loss.std_error, 0.0);
    }

    #[test]
    fn improvement_arithmetic() {
        assert!((improvement(0.140, 0.135).unwrap() - 0.0357).abs() < 1e-4);
        assert!((improvement(0.149, 0.136).unwrap() - 0.0872).abs() < 1e-4);
        assert_eq!(improvement(0.2, 0.2).unwrap(), 0.0);
        assert!(improvement(0.0, 0.1).is_err());
    }
}
