//! Latent spatiotemporal AR(1) disease process and its measurement model.
//!
//! On the logit scale the latent field evolves as
//!
//! ```text
//! η_t = W_t η_{t-1} + c0 + b0·a + Σ_k β1k X_k + Σ_k β2k (X_k ∘ a) + ε_t,
//! ε_t ~ MVN(0, σ_s² (M − ρG)⁻¹)
//! ```
//!
//! where the propagator `W_t` has diagonal `(1 + c1) + b1·a_i` and weight
//! `(c2 + b2·a_i)/m_i` on each neighbour of zone `i`. Observations are
//! `Y_t = η_t + ν_t` with iid `N(0, σ_e²)` measurement noise.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CarPrecision, ZoneGraph};
use crate::stats::inv_logit;

/// Coefficients of the latent process and its noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub c0: f64,
    pub b0: f64,
    pub c1: f64,
    pub b1: f64,
    pub c2: f64,
    pub b2: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub sigma_e2: f64,
    pub sigma_s2: f64,
    pub rho: f64,
}

/// Number of non-covariate regression coefficients (c0, b0, 1+c1, b1, c2, b2).
pub const BASE_COEFFICIENTS: usize = 6;

impl DynamicsParams {
    /// The correctly specified simulation generator with one covariate.
    pub fn simulation_truth() -> Self {
        Self {
            c0: 0.2,
            b0: -0.7,
            c1: -0.1,
            b1: -0.1,
            c2: 0.1,
            b2: -0.1,
            beta1: vec![0.12],
            beta2: vec![-0.1],
            sigma_e2: 0.01 * 0.01,
            sigma_s2: 0.1 * 0.1,
            rho: 0.9,
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.beta1.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta1.len() != self.beta2.len() {
            return Err(Error::Dimension { context: "beta2 length", expected: self.beta1.len(), got: self.beta2.len() });
        }
        if !(self.sigma_e2 > 0.0) {
            return Err(Error::Domain { name: "sigma_e2", value: self.sigma_e2, domain: "(0, inf)" });
        }
        if !(self.sigma_s2 > 0.0) {
            return Err(Error::Domain { name: "sigma_s2", value: self.sigma_s2, domain: "(0, inf)" });
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Domain { name: "rho", value: self.rho, domain: "(0, 1)" });
        }
        let coefs = self.coefficients();
        if coefs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite dynamics coefficient".into()));
        }
        Ok(())
    }

    /// Regression coefficients in the order
    /// `[c0, b0, 1+c1, b1, c2, b2, β1_1..β1_p, β2_1..β2_p]`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = vec![self.c0, self.b0, 1.0 + self.c1, self.b1, self.c2, self.b2];
        v.extend_from_slice(&self.beta1);
        v.extend_from_slice(&self.beta2);
        v
    }

    pub fn set_coefficients(&mut self, coefs: &[f64]) {
        let p = (coefs.len() - BASE_COEFFICIENTS) / 2;
        self.c0 = coefs[0];
        self.b0 = coefs[1];
        self.c1 = coefs[2] - 1.0;
        self.b1 = coefs[3];
        self.c2 = coefs[4];
        self.b2 = coefs[5];
        self.beta1 = coefs[BASE_COEFFICIENTS..BASE_COEFFICIENTS + p].to_vec();
        self.beta2 = coefs[BASE_COEFFICIENTS + p..].to_vec();
    }

    /// Parameter names in CSV column order.
    pub fn column_names(p: usize) -> Vec<String> {
        let mut names: Vec<String> = ["c0", "b0", "c1", "b1", "c2", "b2"].iter().map(|s| s.to_string()).collect();
        names.extend((1..=p).map(|k| format!("beta1_{k}")));
        names.extend((1..=p).map(|k| format!("beta2_{k}")));
        names.extend(["sigma_e2", "sigma_s2", "rho"].iter().map(|s| s.to_string()));
        names
    }

    /// Values in the order of [`DynamicsParams::column_names`].
    pub fn to_row(&self) -> Vec<f64> {
        let mut v = vec![self.c0, self.b0, self.c1, self.b1, self.c2, self.b2];
        v.extend_from_slice(&self.beta1);
        v.extend_from_slice(&self.beta2);
        v.extend([self.sigma_e2, self.sigma_s2, self.rho]);
        v
    }

    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() < 9 || (row.len() - 9) % 2 != 0 {
            return Err(Error::Invalid(format!("parameter row has {} values", row.len())));
        }
        let p = (row.len() - 9) / 2;
        let params = Self {
            c0: row[0],
            b0: row[1],
            c1: row[2],
            b1: row[3],
            c2: row[4],
            b2: row[5],
            beta1: row[6..6 + p].to_vec(),
            beta2: row[6 + p..6 + 2 * p].to_vec(),
            sigma_e2: row[6 + 2 * p],
            sigma_s2: row[7 + 2 * p],
            rho: row[8 + 2 * p],
        };
        params.validate()?;
        Ok(params)
    }
}

/// Allocation-dependent propagator `W_t`, stored as a diagonal plus one
/// neighbour weight per row (every neighbour of zone `i` gets `weight[i]/m_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub diagonal: Vec<f64>,
    pub neighbor_weight: Vec<f64>,
}

impl Propagator {
    /// `W η`
    pub fn apply(&self, graph: &ZoneGraph, eta: &[f64]) -> Vec<f64> {
        let nbr = graph.neighbor_mean(eta);
        (0..eta.len()).map(|i| self.diagonal[i] * eta[i] + self.neighbor_weight[i] * nbr[i]).collect()
    }

    /// `Wᵀ x`
    pub fn apply_transpose(&self, graph: &ZoneGraph, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut out: Vec<f64> = (0..n).map(|i| self.diagonal[i] * x[i]).collect();
        for i in 0..n {
            let w = self.neighbor_weight[i] * x[i] / graph.degree(i) as f64;
            for &j in graph.neighbors(i) {
                out[j] += w;
            }
        }
        out
    }

    pub fn to_dense(&self, graph: &ZoneGraph) -> DMatrix<f64> {
        let n = graph.n_zones();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            w[(i, i)] = self.diagonal[i];
            let m = graph.degree(i) as f64;
            for &j in graph.neighbors(i) {
                w[(i, j)] = self.neighbor_weight[i] / m;
            }
        }
        w
    }
}

fn check_allocation(a: &[f64]) -> Result<()> {
    for &v in a {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain { name: "allocation", value: v, domain: "[0, 1]" });
        }
    }
    Ok(())
}

/// Builds `W_t` for allocation `a`.
pub fn propagator(graph: &ZoneGraph, params: &DynamicsParams, a: &[f64]) -> Result<Propagator> {
    if a.len() != graph.n_zones() {
        return Err(Error::Dimension { context: "allocation", expected: graph.n_zones(), got: a.len() });
    }
    check_allocation(a)?;
    Ok(Propagator {
        diagonal: a.iter().map(|&ai| 1.0 + params.c1 + params.b1 * ai).collect(),
        neighbor_weight: a.iter().map(|&ai| params.c2 + params.b2 * ai).collect(),
    })
}

/// Affine part `c0 + b0·a + d0·a² + Σ β1k X_k + Σ β2k X_k∘a`.
fn offset(params: &DynamicsParams, quadratic: f64, a: &[f64], x: &DMatrix<f64>) -> Vec<f64> {
    (0..a.len())
        .map(|l| {
            let al = a[l];
            let mut v = params.c0 + params.b0 * al + quadratic * al * al;
            for k in 0..params.beta1.len() {
                let xk = x[(l, k)];
                v += params.beta1[k] * xk + params.beta2[k] * xk * al;
            }
            v
        })
        .collect()
}

fn check_dims(graph: &ZoneGraph, params: &DynamicsParams, eta: &[f64], a: &[f64], x: &DMatrix<f64>) -> Result<()> {
    let n = graph.n_zones();
    for (context, got) in [("eta", eta.len()), ("allocation", a.len()), ("covariate rows", x.nrows())] {
        if got != n {
            return Err(Error::Dimension { context, expected: n, got });
        }
    }
    if x.ncols() != params.n_covariates() {
        return Err(Error::Dimension { context: "covariate columns", expected: params.n_covariates(), got: x.ncols() });
    }
    Ok(())
}

/// Source of the innovation `ε_t` or measurement noise.
pub enum Noise<'a> {
    Zero,
    Given(&'a [f64]),
    Sample(&'a mut dyn RngCore),
}

/// A dynamics model ready for repeated simulation: parameters, graph,
/// factored innovation precision and an optional quadratic allocation term
/// (used only by the misspecified simulation generator).
#[derive(Debug, Clone)]
pub struct Dynamics<'g> {
    graph: &'g ZoneGraph,
    params: DynamicsParams,
    quadratic_allocation: f64,
    innovation: CarPrecision,
}

impl<'g> Dynamics<'g> {
    pub fn new(graph: &'g ZoneGraph, params: DynamicsParams) -> Result<Self> {
        params.validate()?;
        let innovation = CarPrecision::new(graph, params.rho, params.sigma_s2)?;
        Ok(Self { graph, params, quadratic_allocation: 0.0, innovation })
    }

    pub fn with_quadratic_allocation(mut self, d0: f64) -> Self {
        self.quadratic_allocation = d0;
        self
    }

    pub fn graph(&self) -> &'g ZoneGraph {
        self.graph
    }

    pub fn params(&self) -> &DynamicsParams {
        &self.params
    }

    pub fn innovation(&self) -> &CarPrecision {
        &self.innovation
    }

    /// Noise-free mean of `η_t` given `η_{t-1}`.
    pub fn mean_step(&self, eta_prev: &[f64], a: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dims(self.graph, &self.params, eta_prev, a, x)?;
        let w = propagator(self.graph, &self.params, a)?;
        let mut eta = w.apply(self.graph, eta_prev);
        for (e, o) in eta.iter_mut().zip(offset(&self.params, self.quadratic_allocation, a, x)) {
            *e += o;
        }
        Ok(eta)
    }

    pub fn step(&self, eta_prev: &[f64], a: &[f64], x: &DMatrix<f64>, noise: Noise<'_>) -> Result<Vec<f64>> {
        let mut eta = self.mean_step(eta_prev, a, x)?;
        match noise {
            Noise::Zero => {}
            Noise::Given(e) => {
                if e.len() != eta.len() {
                    return Err(Error::Dimension { context: "innovation", expected: eta.len(), got: e.len() });
                }
                eta.iter_mut().zip(e).for_each(|(v, e)| *v += e);
            }
            Noise::Sample(rng) => {
                let e = self.innovation.sample(rng);
                eta.iter_mut().zip(e).for_each(|(v, e)| *v += e);
            }
        }
        Ok(eta)
    }
}

/// One step of the latent process. Builds the innovation factor on every
/// call; use [`Dynamics`] for repeated stepping.
pub fn step_latent(
    graph: &ZoneGraph,
    params: &DynamicsParams,
    eta_prev: &[f64],
    a: &[f64],
    x: &DMatrix<f64>,
    noise: Noise<'_>,
) -> Result<Vec<f64>> {
    Dynamics::new(graph, params.clone())?.step(eta_prev, a, x, noise)
}

/// `Y_t = η_t + ν_t`, `ν_t ~ N(0, σ_e²)` elementwise.
pub fn step_measure(eta: &[f64], sigma_e2: f64, noise: Noise<'_>) -> Result<Vec<f64>> {
    if !(sigma_e2 >= 0.0) {
        return Err(Error::Domain { name: "sigma_e2", value: sigma_e2, domain: "[0, inf)" });
    }
    let sd = sigma_e2.sqrt();
    Ok(match noise {
        Noise::Zero => eta.to_vec(),
        Noise::Given(nu) => {
            if nu.len() != eta.len() {
                return Err(Error::Dimension { context: "measurement noise", expected: eta.len(), got: nu.len() });
            }
            eta.iter().zip(nu).map(|(e, v)| e + v).collect()
        }
        Noise::Sample(rng) => eta.iter().map(|e| e + sd * rng.sample::<f64, _>(StandardNormal)).collect(),
    })
}

/// Observed panel: graph, covariates, logit prevalence `Y` (columns `t = 0..T`)
/// and allocations `A` (columns `t = 1..T`).
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub graph: ZoneGraph,
    pub covariates: DMatrix<f64>,
    pub logit_prevalence: DMatrix<f64>,
    pub allocations: DMatrix<f64>,
    /// Year label of each column of `logit_prevalence`.
    pub years: Vec<i64>,
}

impl PanelData {
    pub fn new(
        graph: ZoneGraph,
        covariates: DMatrix<f64>,
        logit_prevalence: DMatrix<f64>,
        allocations: DMatrix<f64>,
        years: Vec<i64>,
    ) -> Result<Self> {
        let n = graph.n_zones();
        for (context, got) in [
            ("covariate rows", covariates.nrows()),
            ("prevalence rows", logit_prevalence.nrows()),
            ("allocation rows", allocations.nrows()),
        ] {
            if got != n {
                return Err(Error::Dimension { context, expected: n, got });
            }
        }
        if logit_prevalence.ncols() != allocations.ncols() + 1 {
            return Err(Error::Dimension {
                context: "prevalence columns (allocation columns + 1)",
                expected: allocations.ncols() + 1,
                got: logit_prevalence.ncols(),
            });
        }
        if years.len() != logit_prevalence.ncols() {
            return Err(Error::Dimension { context: "year labels", expected: logit_prevalence.ncols(), got: years.len() });
        }
        check_allocation(allocations.as_slice())?;
        if logit_prevalence.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite prevalence or covariate".into()));
        }
        Ok(Self { graph, covariates, logit_prevalence, allocations, years })
    }

    pub fn n_zones(&self) -> usize {
        self.graph.n_zones()
    }

    /// Number of transitions `T`.
    pub fn n_transitions(&self) -> usize {
        self.allocations.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn y(&self, t: usize) -> Vec<f64> {
        self.logit_prevalence.column(t).iter().copied().collect()
    }

    /// Allocation applied in transition `t` (1-based, `t = 1..=T`).
    pub fn a(&self, t: usize) -> Vec<f64> {
        self.allocations.column(t - 1).iter().copied().collect()
    }

    /// Keeps only the first `years` observation columns.
    pub fn truncated(&self, years: usize) -> Result<Self> {
        if years < 1 || years > self.logit_prevalence.ncols() {
            return Err(Error::Invalid(format!("cannot truncate panel to {years} years")));
        }
        Self::new(
            self.graph.clone(),
            self.covariates.clone(),
            self.logit_prevalence.columns(0, years).into_owned(),
            self.allocations.columns(0, years - 1).into_owned(),
            self.years[..years].to_vec(),
        )
    }
}

/// Named simulation generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Generator matches the fitted model.
    CorrectSpec,
    /// Adds a quadratic allocation effect the fitted model omits.
    QuadraticMisspec,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" | "correct_spec" => Ok(Self::CorrectSpec),
            "quadratic" | "quadratic_misspec" => Ok(Self::QuadraticMisspec),
            other => Err(Error::Invalid(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Where scenario covariates come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateSource {
    /// Unit-variance Gaussian process on zone centroids with correlation `exp(−d/range)`.
    GaussianProcess { count: usize, range: f64 },
    Given(DMatrix<f64>),
}

/// Full description of a simulation generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub graph: ZoneGraph,
    pub params: DynamicsParams,
    /// `d0`: coefficient of `a²` in the latent mean; zero for the fitted model class.
    pub quadratic_allocation: f64,
    pub covariates: CovariateSource,
    pub transitions: usize,
    pub eta0_sd: f64,
    pub eta0_rho: f64,
    /// Allocation mean is `allocation_slope · t`.
    pub allocation_slope: f64,
    pub allocation_sd: f64,
    /// Extra logit-scale noise on the reported prevalence for `t ≥ 1`.
    pub report_sd: f64,
    /// Multiplies every noise scale; 0 gives a deterministic panel.
    pub noise_scale: f64,
}

impl ScenarioSpec {
    /// 10×10 grid, one covariate, T = 5.
    pub fn standard(kind: ScenarioKind) -> Self {
        let graph = ZoneGraph::grid(10, 10).expect("10x10 grid is valid");
        let mut params = DynamicsParams::simulation_truth();
        let mut quadratic_allocation = 0.0;
        if kind == ScenarioKind::QuadraticMisspec {
            params.c0 = 0.2;
            params.b0 = -0.8;
            quadratic_allocation = 0.2;
        }
        Self {
            graph,
            params,
            quadratic_allocation,
            covariates: CovariateSource::GaussianProcess { count: 1, range: 2.0 },
            transitions: 5,
            eta0_sd: 0.5,
            eta0_rho: 0.9,
            allocation_slope: 0.1,
            allocation_sd: 0.05,
            report_sd: 0.01,
            noise_scale: 1.0,
        }
    }

    pub fn dynamics(&self) -> Result<Dynamics<'_>> {
        Ok(Dynamics::new(&self.graph, self.params.clone())?.with_quadratic_allocation(self.quadratic_allocation))
    }
}

/// A simulated panel together with the hidden latent trajectory.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub data: PanelData,
    /// True latent field, `n × (T+1)`.
    pub latent: DMatrix<f64>,
}

/// Draws `N(mean, sd²)` truncated to `[0, 1]` by rejection.
pub fn truncated_unit_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let normal = Normal::new(mean, sd).expect("positive sd");
    for _ in 0..10_000 {
        let v = rng.sample(normal);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    // essentially no mass inside the interval
    mean.clamp(0.0, 1.0)
}

fn gp_covariates<R: Rng + ?Sized>(graph: &ZoneGraph, count: usize, range: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let coords = graph
        .coords()
        .ok_or_else(|| Error::Invalid("Gaussian-process covariates need zone coordinates".into()))?;
    let n = coords.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
        (-d / range).exp()
    });
    let chol = k.cholesky().ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    let z = DMatrix::from_fn(n, count, |_, _| rng.sample(StandardNormal));
    Ok(chol.l() * z)
}

/// Simulates one panel from `spec`; identical seeds give identical panels.
pub fn simulate_panel(spec: &ScenarioSpec, seed: u64) -> Result<SimulatedPanel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = &spec.graph;
    let n = graph.n_zones();
    let t_max = spec.transitions;
    let s = spec.noise_scale;
    let x = match &spec.covariates {
        CovariateSource::GaussianProcess { count, range } => gp_covariates(graph, *count, *range, &mut rng)?,
        CovariateSource::Given(x) => x.clone(),
    };
    if x.ncols() != spec.params.n_covariates() {
        return Err(Error::Dimension { context: "scenario covariates", expected: spec.params.n_covariates(), got: x.ncols() });
    }
    let dynamics = spec.dynamics()?;
    let mut latent = DMatrix::zeros(n, t_max + 1);
    let mut observed = DMatrix::zeros(n, t_max + 1);
    let mut alloc = DMatrix::zeros(n, t_max);

    let eta0 = if s > 0.0 && spec.eta0_sd > 0.0 {
        CarPrecision::new(graph, spec.eta0_rho, (s * spec.eta0_sd).powi(2))?.sample(&mut rng)
    } else {
        vec![0.0; n]
    };
    let meas_sd = s * spec.params.sigma_e2.sqrt();
    let report_sd = s * spec.report_sd;
    for l in 0..n {
        latent[(l, 0)] = eta0[l];
        observed[(l, 0)] = eta0[l] + meas_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let mut eta = eta0;
    for t in 1..=t_max {
        let a: Vec<f64> = (0..n)
            .map(|_| truncated_unit_normal(&mut rng, spec.allocation_slope * t as f64, s * spec.allocation_sd))
            .collect();
        let noise = if s > 0.0 {
            let e = dynamics.innovation().sample(&mut rng);
            e.into_iter().map(|v| v * s).collect()
        } else {
            vec![0.0; n]
        };
        eta = dynamics.step(&eta, &a, &x, Noise::Given(&noise))?;
        for l in 0..n {
            alloc[(l, t - 1)] = a[l];
            latent[(l, t)] = eta[l];
            let y = eta[l] + meas_sd * rng.sample::<f64, _>(StandardNormal);
            observed[(l, t)] = y + report_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let years = (0..=t_max as i64).collect();
    let data = PanelData::new(graph.clone(), x, observed, alloc, years)?;
    Ok(SimulatedPanel { data, latent })
}

/// Prevalence view of a logit-scale vector.
pub fn prevalence(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&v| inv_logit(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_zone() -> ZoneGraph {
        ZoneGraph::grid(1, 2).unwrap()
    }

    #[test]
    fn propagator_two_zone_simulation_coefficients() {
        let g = two_zone();
        let w = propagator(&g, &DynamicsParams::simulation_truth(), &[0.0, 1.0]).unwrap().to_dense(&g);
        assert_abs_diff_eq!(w[(0, 0)], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(w[(0, 1)], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(w[(1, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[(1, 1)], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn propagator_vanishes_with_null_coefficients() {
        let g = ZoneGraph::grid(3, 3).unwrap();
        let mut p = DynamicsParams::simulation_truth();
        p.c1 = -1.0;
        p.b1 = 0.0;
        p.c2 = 0.0;
        p.b2 = 0.0;
        let a: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let w = propagator(&g, &p, &a).unwrap().to_dense(&g);
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn propagator_rows_sum_to_one_without_allocation() {
        let g = ZoneGraph::grid(10, 10).unwrap();
        let w = propagator(&g, &DynamicsParams::simulation_truth(), &[0.0; 100]).unwrap().to_dense(&g);
        for r in 0..100 {
            assert_abs_diff_eq!(w.row(r).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn propagator_rejects_out_of_range_allocation() {
        let g = two_zone();
        assert!(propagator(&g, &DynamicsParams::simulation_truth(), &[0.0, 1.5]).is_err());
    }

    #[test]
    fn transpose_matches_dense() {
        let g = ZoneGraph::grid(3, 4).unwrap();
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).fract()).collect();
        let w = propagator(&g, &DynamicsParams::simulation_truth(), &a).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let dense = w.to_dense(&g).transpose() * nalgebra::DVector::from_vec(x.clone());
        let fast = w.apply_transpose(&g, &x);
        for i in 0..12 {
            assert_abs_diff_eq!(dense[i], fast[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn step_latent_full_allocation_from_origin() {
        let g = two_zone();
        let x = DMatrix::zeros(2, 1);
        let eta = step_latent(&g, &DynamicsParams::simulation_truth(), &[0.0, 0.0], &[1.0, 1.0], &x, Noise::Zero).unwrap();
        assert_abs_diff_eq!(eta[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(eta[1], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn step_latent_origin_is_fixed_point_without_intercept() {
        let g = ZoneGraph::grid(2, 3).unwrap();
        let mut p = DynamicsParams::simulation_truth();
        p.c0 = 0.0;
        let x = DMatrix::zeros(6, 1);
        let eta = step_latent(&g, &p, &[0.0; 6], &[0.0; 6], &x, Noise::Given(&[0.0; 6])).unwrap();
        assert!(eta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_latent_hand_evaluation() {
        let g = two_zone();
        let x = DMatrix::zeros(2, 1);
        let eta = step_latent(&g, &DynamicsParams::simulation_truth(), &[1.0, 0.0], &[0.0, 0.0], &x, Noise::Zero).unwrap();
        assert_abs_diff_eq!(eta[0], 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(eta[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn step_latent_dimension_mismatch() {
        let g = two_zone();
        let x = DMatrix::zeros(2, 1);
        let p = DynamicsParams::simulation_truth();
        assert!(matches!(
            step_latent(&g, &p, &[0.0; 3], &[0.0, 0.0], &x, Noise::Zero),
            Err(Error::Dimension { .. })
        ));
        assert!(step_latent(&g, &p, &[0.0; 2], &[0.0, 0.0], &DMatrix::zeros(2, 2), Noise::Zero).is_err());
    }

    #[test]
    fn step_measure_passthrough_and_small_noise() {
        assert_eq!(step_measure(&[-0.5, 0.3], 0.2, Noise::Zero).unwrap(), vec![-0.5, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = step_measure(&[0.0; 50], 1e-4, Noise::Sample(&mut rng)).unwrap();
        assert!(y.iter().all(|v| v.abs() < 0.05));
        assert_abs_diff_eq!(inv_logit(-0.5), 0.37754, epsilon = 1e-5);
    }

    #[test]
    fn simulated_panel_dimensions() {
        let sim = simulate_panel(&ScenarioSpec::standard(ScenarioKind::CorrectSpec), 1).unwrap();
        assert_eq!(sim.data.logit_prevalence.shape(), (100, 6));
        assert_eq!(sim.data.allocations.shape(), (100, 5));
        assert!(sim.data.allocations.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let spec = ScenarioSpec::standard(ScenarioKind::QuadraticMisspec);
        let a = simulate_panel(&spec, 9).unwrap();
        let b = simulate_panel(&spec, 9).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_panel(&spec, 10).unwrap();
        assert_ne!(a.data.logit_prevalence, c.data.logit_prevalence);
    }

    #[test]
    fn noiseless_panel_drifts_by_intercept() {
        let mut spec = ScenarioSpec::standard(ScenarioKind::CorrectSpec);
        spec.noise_scale = 0.0;
        spec.allocation_slope = 0.0;
        spec.covariates = CovariateSource::Given(DMatrix::zeros(100, 1));
        let sim = simulate_panel(&spec, 0).unwrap();
        // rows of W sum to one at a = 0, so the mean moves by c0 each year
        for t in 1..=5 {
            let mean = sim.latent.column(t).mean() - sim.latent.column(t - 1).mean();
            assert_abs_diff_eq!(mean, 0.2, epsilon = 1e-12);
        }
        assert_eq!(sim.data.logit_prevalence, sim.latent);
    }

    #[test]
    fn unknown_scenario_name() {
        assert!("bogus".parse::<ScenarioKind>().is_err());
        assert_eq!("correct".parse::<ScenarioKind>().unwrap(), ScenarioKind::CorrectSpec);
    }

    #[test]
    fn truncation_never_leaves_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..1_000_000 {
            let t = 1 + i % 5;
            let v = truncated_unit_normal(&mut rng, 0.1 * t as f64, 0.05);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn parameter_row_round_trip() {
        let p = DynamicsParams::simulation_truth();
        assert_eq!(DynamicsParams::from_row(&p.to_row()).unwrap(), p);
        assert_eq!(DynamicsParams::column_names(1).len(), p.to_row().len());
        let mut q = p.clone();
        q.set_coefficients(&p.coefficients());
        assert_abs_diff_eq!(q.c1, p.c1, epsilon = 1e-15);
    }
}
