//! Utility-based allocation policies.
//!
//! A policy scores every zone with a logistic priority built from risk
//! factors, then allocates coverage by maximizing the sum of local utilities
//! minus a penalty on squared coverage differences between neighbours,
//! subject to box and population-weighted budget constraints.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ZoneGraph;
use crate::qp::{AllocationQp, QpSolution};
use crate::stats::inv_logit;

/// Risk factors `f_kl` for one decision epoch, one row per zone.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskFactors {
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
}

impl RiskFactors {
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Invalid("at least one risk factor is required".into()));
        }
        if names.len() != values.ncols() {
            return Err(Error::Dimension { context: "risk factor names", expected: values.ncols(), got: names.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite risk factor".into()));
        }
        Ok(Self { values, names })
    }

    pub fn n_factors(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    Linear,
    Quadratic,
}

impl std::fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UtilityKind::Linear => "linear",
            UtilityKind::Quadratic => "quadratic",
        })
    }
}

impl std::str::FromStr for UtilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::Invalid(format!("unknown utility kind {other:?}"))),
        }
    }
}

/// Penalty weight `α0` and risk-factor weights `α_1..α_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    pub utility_kind: UtilityKind,
}

impl PolicyParams {
    pub fn new(alpha0: f64, alpha: Vec<f64>, utility_kind: UtilityKind) -> Result<Self> {
        if !(alpha0 >= 0.0) || !alpha0.is_finite() {
            return Err(Error::Domain { name: "alpha0", value: alpha0, domain: "[0, inf)" });
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Invalid("non-finite policy weight".into()));
        }
        Ok(Self { alpha0, alpha, utility_kind })
    }

    /// Packs as `[α0, α_1, .., α_q]`.
    pub fn to_point(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.alpha.len() + 1);
        v.push(self.alpha0);
        v.extend_from_slice(&self.alpha);
        v
    }

    pub fn from_point(point: &[f64], utility_kind: UtilityKind) -> Result<Self> {
        Self::new(point[0], point[1..].to_vec(), utility_kind)
    }
}

/// Per-zone coverage in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation(pub Vec<f64>);

impl Allocation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Population-weighted mean coverage `Σ a_l N_l / Σ N_l`.
    pub fn budget_share(&self, populations: &[f64]) -> f64 {
        let total: f64 = populations.iter().sum();
        self.0.iter().zip(populations).map(|(a, n)| a * n).sum::<f64>() / total
    }

    /// `Σ_{i∼j} (a_i − a_j)²` over undirected edges.
    pub fn neighbor_penalty(&self, graph: &ZoneGraph) -> f64 {
        graph.edges().map(|(i, j)| (self.0[i] - self.0[j]).powi(2)).sum()
    }
}

/// Logistic priority `1/(1 + exp(−f·α))` for every zone.
pub fn priority_scores(factors: &RiskFactors, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != factors.n_factors() {
        return Err(Error::Dimension { context: "policy weights", expected: factors.n_factors(), got: alpha.len() });
    }
    Ok(factors
        .values
        .row_iter()
        .map(|row| inv_logit(row.iter().zip(alpha).map(|(f, a)| f * a).sum()))
        .collect())
}

/// Local utility of coverage `a` at priority `p`.
pub fn local_utility(a: f64, p: f64, kind: UtilityKind) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain { name: "allocation", value: a, domain: "[0, 1]" });
    }
    Ok(match kind {
        UtilityKind::Linear => a * p,
        UtilityKind::Quadratic => p * a * (2.0 - a),
    })
}

/// Sum of local utilities minus `α0 Σ_{i∼j} (a_i − a_j)²`.
pub fn global_utility(a: &Allocation, scores: &[f64], alpha0: f64, graph: &ZoneGraph, kind: UtilityKind) -> Result<f64> {
    let n = graph.n_zones();
    if a.0.len() != n || scores.len() != n {
        return Err(Error::Dimension { context: "global utility inputs", expected: n, got: a.0.len().min(scores.len()) });
    }
    if !(alpha0 >= 0.0) {
        return Err(Error::Domain { name: "alpha0", value: alpha0, domain: "[0, inf)" });
    }
    let mut total = 0.0;
    for (&al, &pl) in a.0.iter().zip(scores) {
        total += local_utility(al, pl, kind)?;
    }
    Ok(total - alpha0 * a.neighbor_penalty(graph))
}

/// Zones whose current prevalence is below `threshold` (these receive nothing).
pub fn zero_floor_mask(prevalence: &[f64], threshold: f64) -> Vec<bool> {
    prevalence.iter().map(|&z| z < threshold).collect()
}

/// Solution of the allocation problem together with its certificate.
#[derive(Debug, Clone)]
pub struct AllocationReport {
    pub allocation: Allocation,
    pub global_utility: f64,
    pub budget_used: f64,
    pub budget_multiplier: f64,
    pub kkt_residual: f64,
    pub zones_at_zero: usize,
    pub zones_at_one: usize,
}

impl AllocationReport {
    pub fn budget_binding(&self, budget: f64) -> bool {
        self.budget_used >= budget - 1e-9
    }
}

fn build_qp<'g>(
    scores: &[f64],
    alpha0: f64,
    kind: UtilityKind,
    graph: &'g ZoneGraph,
    budget: f64,
    excluded: Option<&[bool]>,
) -> Result<AllocationQp<'g>> {
    let n = graph.n_zones();
    if scores.len() != n {
        return Err(Error::Dimension { context: "priority scores", expected: n, got: scores.len() });
    }
    if let Some(ex) = excluded {
        if ex.len() != n {
            return Err(Error::Dimension { context: "zero-floor mask", expected: n, got: ex.len() });
        }
    }
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Domain { name: "budget", value: budget, domain: "[0, 1]" });
    }
    if !(alpha0 >= 0.0) {
        return Err(Error::Domain { name: "alpha0", value: alpha0, domain: "[0, inf)" });
    }
    for &p in scores {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain { name: "priority score", value: p, domain: "(0, 1]" });
        }
    }
    let total: f64 = graph.populations().iter().sum();
    let (curvature, linear) = match kind {
        UtilityKind::Linear => (vec![0.0; n], scores.iter().map(|p| -p).collect()),
        UtilityKind::Quadratic => (scores.to_vec(), scores.iter().map(|p| -2.0 * p).collect()),
    };
    Ok(AllocationQp {
        graph,
        curvature,
        linear,
        alpha0,
        upper: (0..n).map(|l| if excluded.is_some_and(|ex| ex[l]) { 0.0 } else { 1.0 }).collect(),
        weights: graph.populations().iter().map(|p| p / total).collect(),
        budget,
    })
}

/// Maximizes the penalized global utility under the budget; returns the
/// allocation and its optimality certificate.
pub fn allocate_with_report(
    scores: &[f64],
    params: &PolicyParams,
    graph: &ZoneGraph,
    budget: f64,
    excluded: Option<&[bool]>,
) -> Result<AllocationReport> {
    let qp = build_qp(scores, params.alpha0, params.utility_kind, graph, budget, excluded)?;
    let QpSolution { a, objective, lambda, kkt_residual, .. } = qp.solve()?;
    let allocation = Allocation(a);
    Ok(AllocationReport {
        budget_used: allocation.budget_share(graph.populations()),
        zones_at_zero: allocation.0.iter().filter(|&&v| v <= 1e-12).count(),
        zones_at_one: allocation.0.iter().filter(|&&v| v >= 1.0 - 1e-12).count(),
        allocation,
        global_utility: -objective,
        budget_multiplier: lambda,
        kkt_residual,
    })
}

/// The policy map: budget-constrained argmax of the global utility.
pub fn allocate(
    scores: &[f64],
    params: &PolicyParams,
    graph: &ZoneGraph,
    budget: f64,
    excluded: Option<&[bool]>,
) -> Result<Allocation> {
    Ok(allocate_with_report(scores, params, graph, budget, excluded)?.allocation)
}

/// The two fixed comparison policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    HighestRate,
    Even,
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Baseline::HighestRate => "highest_rate",
            Baseline::Even => "even",
        })
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest_rate" => Ok(Self::HighestRate),
            "even" => Ok(Self::Even),
            other => Err(Error::Invalid(format!("unknown baseline policy {other:?}"))),
        }
    }
}

impl Baseline {
    pub fn allocate(self, current_rates: &[f64], graph: &ZoneGraph, budget: f64) -> Result<Allocation> {
        match self {
            Baseline::HighestRate => baseline_highest_rate(current_rates, graph, budget),
            Baseline::Even => baseline_even(graph, budget),
        }
    }
}

/// Full coverage for the `⌊nC⌋` zones with the highest current rates
/// (lower index wins ties), nothing elsewhere.
pub fn baseline_highest_rate(current_rates: &[f64], graph: &ZoneGraph, budget: f64) -> Result<Allocation> {
    let n = graph.n_zones();
    if current_rates.len() != n {
        return Err(Error::Dimension { context: "current rates", expected: n, got: current_rates.len() });
    }
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Domain { name: "budget", value: budget, domain: "[0, 1]" });
    }
    let k = ((n as f64) * budget + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| current_rates[j].total_cmp(&current_rates[i]).then(i.cmp(&j)));
    let mut a = vec![0.0; n];
    for &l in order.iter().take(k) {
        a[l] = 1.0;
    }
    Ok(Allocation(a))
}

/// The same coverage `C` everywhere.
pub fn baseline_even(graph: &ZoneGraph, budget: f64) -> Result<Allocation> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Domain { name: "budget", value: budget, domain: "[0, 1]" });
    }
    Ok(Allocation(vec![budget; graph.n_zones()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn factors(rows: &[&[f64]]) -> RiskFactors {
        let q = rows[0].len();
        let m = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
        RiskFactors::new(m, (0..q).map(|k| format!("f{k}")).collect()).unwrap()
    }

    #[test]
    fn priority_of_zero_factors_is_half() {
        let f = factors(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(priority_scores(&f, &[3.0, -2.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn priority_direct_logistic() {
        let f = factors(&[&[1.0, 1.0, 1.0, 1.0]]);
        let p = priority_scores(&f, &[2.1, 1.3, 3.1, 0.77]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / (1.0 + (-7.27f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 0.99930, epsilon = 1e-5);
    }

    #[test]
    fn priority_sign_symmetry() {
        let f = factors(&[&[0.3, -1.2], &[2.0, 0.5]]);
        let g = factors(&[&[-0.3, 1.2], &[-2.0, -0.5]]);
        assert_eq!(priority_scores(&f, &[0.7, 1.1]).unwrap(), priority_scores(&g, &[-0.7, -1.1]).unwrap());
    }

    #[test]
    fn priority_dimension_mismatch() {
        let f = factors(&[&[0.3, -1.2]]);
        assert!(matches!(priority_scores(&f, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn local_utility_values() {
        for kind in [UtilityKind::Linear, UtilityKind::Quadratic] {
            assert_eq!(local_utility(0.0, 0.7, kind).unwrap(), 0.0);
            assert!(local_utility(1.2, 0.7, kind).is_err());
            assert!(local_utility(-0.1, 0.7, kind).is_err());
        }
        assert_abs_diff_eq!(local_utility(1.0, 0.6, UtilityKind::Quadratic).unwrap(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(local_utility(0.5, 0.8, UtilityKind::Linear).unwrap(), 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(local_utility(0.5, 0.8, UtilityKind::Quadratic).unwrap(), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn global_utility_values() {
        let g = ZoneGraph::grid(1, 2).unwrap();
        let u = global_utility(&Allocation(vec![1.0, 0.0]), &[0.5, 0.5], 1.0, &g, UtilityKind::Linear).unwrap();
        assert_abs_diff_eq!(u, -0.5, epsilon = 1e-15);

        let g = ZoneGraph::grid(3, 3).unwrap();
        let p: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let flat = Allocation(vec![0.4; 9]);
        let expect: f64 = p.iter().map(|pl| local_utility(0.4, *pl, UtilityKind::Quadratic).unwrap()).sum();
        assert_abs_diff_eq!(global_utility(&flat, &p, 5.0, &g, UtilityKind::Quadratic).unwrap(), expect, epsilon = 1e-12);

        let bumpy = Allocation((0..9).map(|i| (i % 2) as f64).collect());
        let sum: f64 = p.iter().zip(&bumpy.0).map(|(pl, al)| local_utility(*al, *pl, UtilityKind::Linear).unwrap()).sum();
        assert_eq!(global_utility(&bumpy, &p, 0.0, &g, UtilityKind::Linear).unwrap(), sum);
    }

    #[test]
    fn linear_greedy_fill() {
        let g = ZoneGraph::grid(2, 2).unwrap();
        let params = PolicyParams::new(0.0, vec![], UtilityKind::Linear).unwrap();
        let a = allocate(&[0.9, 0.5, 0.3, 0.1], &params, &g, 0.5, None).unwrap();
        assert_eq!(a.0, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_water_filling() {
        let g = ZoneGraph::grid(1, 2).unwrap();
        let params = PolicyParams::new(0.0, vec![], UtilityKind::Quadratic).unwrap();
        let a = allocate(&[0.8, 0.2], &params, &g, 0.5, None).unwrap();
        assert_abs_diff_eq!(a.0[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(a.0[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn full_budget_covers_everything() {
        let g = ZoneGraph::grid(3, 3).unwrap();
        let p: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        for kind in [UtilityKind::Linear, UtilityKind::Quadratic] {
            for alpha0 in [0.0, 0.4] {
                let params = PolicyParams::new(alpha0, vec![], kind).unwrap();
                let a = allocate(&p, &params, &g, 1.0, None).unwrap();
                assert!(a.0.iter().all(|&v| (v - 1.0).abs() < 1e-9), "{kind} {alpha0}: {:?}", a.0);
            }
        }
    }

    #[test]
    fn zero_floor_zones_get_nothing() {
        let g = ZoneGraph::grid(2, 3).unwrap();
        let prevalence = [0.005, 0.2, 0.3, 0.009, 0.5, 0.4];
        let mask = zero_floor_mask(&prevalence, 0.01);
        let params = PolicyParams::new(0.3, vec![], UtilityKind::Quadratic).unwrap();
        let a = allocate(&[0.9, 0.5, 0.5, 0.9, 0.5, 0.5], &params, &g, 0.6, Some(&mask)).unwrap();
        assert_eq!(a.0[0], 0.0);
        assert_eq!(a.0[3], 0.0);
        assert!(a.budget_share(g.populations()) <= 0.6 + 1e-9);
    }

    #[test]
    fn population_weighted_budget() {
        let g = ZoneGraph::grid(1, 3).unwrap().with_populations(vec![1.0, 2.0, 7.0]).unwrap();
        let params = PolicyParams::new(0.1, vec![], UtilityKind::Quadratic).unwrap();
        let a = allocate(&[0.3, 0.6, 0.9], &params, &g, 0.25, None).unwrap();
        assert!(a.budget_share(g.populations()) <= 0.25 + 1e-9);
    }

    #[test]
    fn highest_rate_baseline() {
        let g = ZoneGraph::grid(2, 2).unwrap();
        assert_eq!(baseline_highest_rate(&[0.4, 0.3, 0.2, 0.1], &g, 0.5).unwrap().0, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(baseline_highest_rate(&[0.4, 0.3, 0.2, 0.1], &g, 0.0).unwrap().0, vec![0.0; 4]);
        assert_eq!(baseline_highest_rate(&[0.4, 0.3, 0.3, 0.1], &g, 0.5).unwrap().0, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(baseline_highest_rate(&[0.1, 0.3, 0.3, 0.4], &g, 0.5).unwrap().0, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn even_baseline() {
        let g = ZoneGraph::grid(1, 3).unwrap();
        assert_eq!(baseline_even(&g, 0.3).unwrap().0, vec![0.3; 3]);
        assert_eq!(baseline_even(&g, 0.0).unwrap().0, vec![0.0; 3]);
        assert_eq!(baseline_even(&g, 1.0).unwrap().0, vec![1.0; 3]);
        assert!(baseline_even(&g, 1.2).is_err());
    }

    #[test]
    fn negative_alpha0_rejected() {
        assert!(PolicyParams::new(-0.1, vec![1.0], UtilityKind::Linear).is_err());
    }
}
