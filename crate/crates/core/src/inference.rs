//! Gibbs sampler for the latent autoregressive model.
//!
//! One sweep updates, in order: the regression coefficients (conjugate
//! Normal, the latent mean is linear in them), the two variances (conjugate
//! Inverse-Gamma), the spatial dependence `ρ` (adaptive random-walk
//! Metropolis on the logit scale) and finally each latent time slice `η_t`
//! from its sparse Gaussian full conditional.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagator, DynamicsParams, PanelData, Propagator, BASE_COEFFICIENTS};
use crate::error::{Error, Result};
use crate::graph::ZoneGraph;
use crate::sparse::{SparseCholesky, SparseSym};
use crate::stats::{logit, inv_logit, mean, quantile_sorted};

/// Prior hyperparameters. `ρ` always has a uniform prior on (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// Variance of the shared `N(0, v)` prior on every regression coefficient.
    pub coef_variance: f64,
    /// Inverse-Gamma shape for both variances.
    pub var_shape: f64,
    /// Inverse-Gamma rate for both variances.
    pub var_rate: f64,
    /// Variance of the iid Normal prior on the initial latent field.
    pub eta0_variance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { coef_variance: 100.0, var_shape: 0.1, var_rate: 0.1, eta0_variance: 100.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("coef_variance", self.coef_variance),
            ("var_shape", self.var_shape),
            ("var_rate", self.var_rate),
            ("eta0_variance", self.eta0_variance),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Domain { name, value, domain: "(0, inf)" });
            }
        }
        Ok(())
    }
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub seed: u64,
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub params: DynamicsParams,
    /// Latent field, `n × (T+1)`; may hold only trailing years when loaded from disk.
    pub latent: DMatrix<f64>,
}

impl PosteriorDraw {
    /// Latent column counted from the end (`0` is the final year).
    pub fn latent_from_end(&self, back: usize) -> Option<Vec<f64>> {
        let cols = self.latent.ncols();
        (back < cols).then(|| self.latent.column(cols - 1 - back).iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub draws: Vec<PosteriorDraw>,
    pub n_iter: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Post-burn-in Metropolis acceptance rate for `ρ`.
    pub acceptance_rate_rho: f64,
    /// Final random-walk step on logit `ρ` after adaptation.
    pub rho_step: f64,
    /// Log joint density after every sweep, burn-in included.
    pub log_posterior: Vec<f64>,
}

impl PosteriorDraws {
    pub fn n_kept(&self) -> usize {
        self.draws.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.draws.first().map_or(0, |d| d.params.n_covariates())
    }

    /// Column `name` of the parameter table across draws.
    pub fn parameter(&self, name: &str) -> Option<Vec<f64>> {
        let names = DynamicsParams::column_names(self.n_covariates());
        let k = names.iter().position(|n| n == name)?;
        Some(self.draws.iter().map(|d| d.params.to_row()[k]).collect())
    }
}

/// Summary of one parameter's marginal posterior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Whether the 95% interval excludes zero.
    pub excludes_zero: bool,
}

/// Posterior means and equal-tailed 95% intervals for every scalar parameter.
pub fn posterior_summary(draws: &PosteriorDraws) -> Result<Vec<ParameterSummary>> {
    if draws.n_kept() < 2 {
        return Err(Error::InsufficientData(format!("{} posterior draws; need at least 2", draws.n_kept())));
    }
    let names = DynamicsParams::column_names(draws.n_covariates());
    let rows: Vec<Vec<f64>> = draws.draws.iter().map(|d| d.params.to_row()).collect();
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let mut v: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            v.sort_by(f64::total_cmp);
            let lower = quantile_sorted(&v, 0.025);
            let upper = quantile_sorted(&v, 0.975);
            ParameterSummary { name, mean: mean(&v), lower, upper, excludes_zero: lower > 0.0 || upper < 0.0 }
        })
        .collect())
}

/// Uniform subsample of `k` draws without replacement, in original order.
pub fn thin_draws(draws: &PosteriorDraws, k: usize, seed: u64) -> Result<PosteriorDraws> {
    let n = draws.n_kept();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("cannot keep {k} of {n} posterior draws")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(PosteriorDraws { draws: idx.into_iter().map(|i| draws.draws[i].clone()).collect(), ..draws.clone() })
}

/// Columns of the regression design for one transition, in coefficient order
/// `[1, a, η, a∘η, η̄, a∘η̄, X_k.., X_k∘a..]` where `η̄` is the neighbour mean.
pub fn design_columns(graph: &ZoneGraph, eta_prev: &[f64], a: &[f64], x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = eta_prev.len();
    let nbr = graph.neighbor_mean(eta_prev);
    let mut cols = vec![
        vec![1.0; n],
        a.to_vec(),
        eta_prev.to_vec(),
        (0..n).map(|i| a[i] * eta_prev[i]).collect(),
        nbr.clone(),
        (0..n).map(|i| a[i] * nbr[i]).collect(),
    ];
    for k in 0..x.ncols() {
        cols.push(x.column(k).iter().copied().collect());
    }
    for k in 0..x.ncols() {
        cols.push((0..n).map(|i| x[(i, k)] * a[i]).collect());
    }
    cols
}

fn combine(cols: &[Vec<f64>], theta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols[0].len()];
    for (col, &th) in cols.iter().zip(theta) {
        out.iter_mut().zip(col).for_each(|(o, c)| *o += th * c);
    }
    out
}

/// `(M − ρG) x`.
fn car_mul(graph: &ZoneGraph, rho: f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| graph.degree(i) as f64 * x[i] - rho * graph.neighbors(i).iter().map(|&j| x[j]).sum::<f64>())
        .collect()
}

/// `(xᵀMx, xᵀGx)` so that `xᵀ(M − ρG)x` is cheap for any `ρ`.
fn car_parts(graph: &ZoneGraph, x: &[f64]) -> (f64, f64) {
    let m: f64 = (0..x.len()).map(|i| graph.degree(i) as f64 * x[i] * x[i]).sum();
    let g: f64 = (0..x.len()).map(|i| x[i] * graph.neighbors(i).iter().map(|&j| x[j]).sum::<f64>()).sum();
    (m, g)
}

fn car_log_det(graph: &ZoneGraph, rho: f64) -> Result<f64> {
    Ok(graph.car_structure(rho).cholesky()?.log_det())
}

/// Rows of `W` as `(column, value)` lists.
fn propagator_rows(graph: &ZoneGraph, w: &Propagator) -> Vec<Vec<(usize, f64)>> {
    (0..graph.n_zones())
        .map(|i| {
            let m = graph.degree(i) as f64;
            let mut row = vec![(i, w.diagonal[i])];
            row.extend(graph.neighbors(i).iter().map(|&j| (j, w.neighbor_weight[i] / m)));
            row
        })
        .collect()
}

/// `Wᵀ (M − ρG) W` scaled by `scale`, as a diagonal plus upper-triangle entries.
fn sandwich(graph: &ZoneGraph, w: &Propagator, rho: f64, scale: f64) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
    let n = graph.n_zones();
    let rows = propagator_rows(graph, w);
    let mut acc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    let mut qw_row: BTreeMap<usize, f64> = BTreeMap::new();
    for k in 0..n {
        qw_row.clear();
        let mk = graph.degree(k) as f64;
        for &(j, v) in &rows[k] {
            *qw_row.entry(j).or_default() += mk * v;
        }
        for &l in graph.neighbors(k) {
            for &(j, v) in &rows[l] {
                *qw_row.entry(j).or_default() -= rho * v;
            }
        }
        for &(i, wki) in &rows[k] {
            for (&j, &qkj) in &qw_row {
                if j >= i {
                    *acc[i].entry(j).or_default() += wki * qkj;
                }
            }
        }
    }
    let mut diag = vec![0.0; n];
    let mut entries = Vec::new();
    for (i, row) in acc.into_iter().enumerate() {
        for (j, v) in row {
            if j == i {
                diag[i] = scale * v;
            } else {
                entries.push((i, j, scale * v));
            }
        }
    }
    (diag, entries)
}

fn inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let g: f64 = rng.sample(Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters"));
    1.0 / g
}

/// Precision and mean of the Gaussian full conditional of the coefficient
/// block given the latent field and the noise parameters.
pub fn coefficient_conditional(
    data: &PanelData,
    latent: &DMatrix<f64>,
    sigma_s2: f64,
    rho: f64,
    prior: &PriorSpec,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = BASE_COEFFICIENTS + 2 * data.n_covariates();
    let mut precision = DMatrix::from_diagonal_element(k, k, 1.0 / prior.coef_variance);
    let mut rhs = DVector::zeros(k);
    for t in 1..=data.n_transitions() {
        let eta_prev: Vec<f64> = latent.column(t - 1).iter().copied().collect();
        let eta: Vec<f64> = latent.column(t).iter().copied().collect();
        let cols = design_columns(&data.graph, &eta_prev, &data.a(t), &data.covariates);
        let q_cols: Vec<Vec<f64>> = cols.iter().map(|c| car_mul(&data.graph, rho, c)).collect();
        for r in 0..k {
            for c in r..k {
                let v: f64 = q_cols[r].iter().zip(&cols[c]).map(|(x, y)| x * y).sum::<f64>() / sigma_s2;
                precision[(r, c)] += v;
                if c != r {
                    precision[(c, r)] += v;
                }
            }
            rhs[r] += q_cols[r].iter().zip(&eta).map(|(x, y)| x * y).sum::<f64>() / sigma_s2;
        }
    }
    let mean = precision.clone().cholesky().map_or_else(|| DVector::zeros(k), |c| c.solve(&rhs));
    (precision, mean)
}

/// Innovations `η_t − E[η_t | η_{t−1}]` for every transition, as columns.
fn innovations(data: &PanelData, latent: &DMatrix<f64>, theta: &[f64]) -> Vec<Vec<f64>> {
    (1..=data.n_transitions())
        .map(|t| {
            let eta_prev: Vec<f64> = latent.column(t - 1).iter().copied().collect();
            let cols = design_columns(&data.graph, &eta_prev, &data.a(t), &data.covariates);
            let m = combine(&cols, theta);
            latent.column(t).iter().zip(m).map(|(e, m)| e - m).collect()
        })
        .collect()
}

/// Log joint density of data, latent field and parameters (up to a constant).
pub fn log_posterior(data: &PanelData, latent: &DMatrix<f64>, params: &DynamicsParams, prior: &PriorSpec) -> Result<f64> {
    let n = data.n_zones() as f64;
    let t_max = data.n_transitions() as f64;
    let theta = params.coefficients();
    let resid: f64 = (data.logit_prevalence.clone() - latent).iter().map(|v| v * v).sum();
    let mut lp = -0.5 * n * (t_max + 1.0) * params.sigma_e2.ln() - 0.5 * resid / params.sigma_e2;
    let log_det = car_log_det(&data.graph, params.rho)?;
    for r in innovations(data, latent, &theta) {
        let (m, g) = car_parts(&data.graph, &r);
        lp += 0.5 * log_det - 0.5 * n * params.sigma_s2.ln() - 0.5 * (m - params.rho * g) / params.sigma_s2;
    }
    lp -= 0.5 * latent.column(0).iter().map(|v| v * v).sum::<f64>() / prior.eta0_variance;
    lp -= 0.5 * theta.iter().map(|v| v * v).sum::<f64>() / prior.coef_variance;
    for s2 in [params.sigma_e2, params.sigma_s2] {
        lp += -(prior.var_shape + 1.0) * s2.ln() - prior.var_rate / s2;
    }
    Ok(lp)
}

fn pooled_diff_variance(data: &PanelData) -> f64 {
    let mut diffs = Vec::new();
    for t in 1..=data.n_transitions() {
        for l in 0..data.n_zones() {
            diffs.push(data.logit_prevalence[(l, t)] - data.logit_prevalence[(l, t - 1)]);
        }
    }
    let v = crate::stats::sample_sd(&diffs).powi(2);
    if v > 0.0 && v.is_finite() { v } else { 1.0 }
}

/// Draws the latent slice `η_t` from its full conditional.
fn draw_latent_slice<R: Rng + ?Sized>(
    data: &PanelData,
    latent: &DMatrix<f64>,
    params: &DynamicsParams,
    prior: &PriorSpec,
    t: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let graph = &data.graph;
    let n = data.n_zones();
    let t_max = data.n_transitions();
    let theta = params.coefficients();
    let inv_e = 1.0 / params.sigma_e2;
    let inv_s = 1.0 / params.sigma_s2;
    let mut diag = vec![inv_e; n];
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut canon: Vec<f64> = (0..n).map(|l| data.logit_prevalence[(l, t)] * inv_e).collect();
    if t == 0 {
        diag.iter_mut().for_each(|d| *d += 1.0 / prior.eta0_variance);
    } else {
        let eta_prev: Vec<f64> = latent.column(t - 1).iter().copied().collect();
        let mu = combine(&design_columns(graph, &eta_prev, &data.a(t), &data.covariates), &theta);
        for l in 0..n {
            diag[l] += graph.degree(l) as f64 * inv_s;
        }
        entries.extend(graph.edges().map(|(i, j)| (i, j, -params.rho * inv_s)));
        for (c, q) in canon.iter_mut().zip(car_mul(graph, params.rho, &mu)) {
            *c += q * inv_s;
        }
    }
    if t < t_max {
        let a_next = data.a(t + 1);
        let w = propagator(graph, params, &a_next)?;
        let eta: Vec<f64> = latent.column(t).iter().copied().collect();
        let eta_next: Vec<f64> = latent.column(t + 1).iter().copied().collect();
        // offset of the next transition: its mean minus the part carried by η_t
        let mean_next = combine(&design_columns(graph, &eta, &a_next, &data.covariates), &theta);
        let carried = w.apply(graph, &eta);
        let target: Vec<f64> = (0..n).map(|l| eta_next[l] - (mean_next[l] - carried[l])).collect();
        let (d2, e2) = sandwich(graph, &w, params.rho, inv_s);
        diag.iter_mut().zip(d2).for_each(|(d, v)| *d += v);
        entries.extend(e2);
        let back = w.apply_transpose(graph, &car_mul(graph, params.rho, &target));
        canon.iter_mut().zip(back).for_each(|(c, b)| *c += b * inv_s);
    }
    let factor: SparseCholesky = SparseSym::from_entries(diag, entries).cholesky()?;
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(factor.sample_canonical(&canon, &z))
}

/// Runs the sampler and keeps every post-burn-in sweep.
pub fn gibbs_fit(data: &PanelData, prior: &PriorSpec, config: GibbsConfig) -> Result<PosteriorDraws> {
    run_sampler(data, prior, config, None)
}

/// Sampler with the latent field held at `latent` instead of being drawn.
pub fn gibbs_fit_known_latent(data: &PanelData, prior: &PriorSpec, config: GibbsConfig, latent: &DMatrix<f64>) -> Result<PosteriorDraws> {
    if latent.shape() != data.logit_prevalence.shape() {
        return Err(Error::Dimension { context: "known latent field", expected: data.logit_prevalence.len(), got: latent.len() });
    }
    run_sampler(data, prior, config, Some(latent))
}

fn run_sampler(data: &PanelData, prior: &PriorSpec, config: GibbsConfig, known: Option<&DMatrix<f64>>) -> Result<PosteriorDraws> {
    prior.validate()?;
    let GibbsConfig { n_iter, burn_in, seed } = config;
    if data.n_transitions() == 0 {
        return Err(Error::InsufficientData("panel has a single year; at least one transition is required".into()));
    }
    if n_iter <= burn_in {
        return Err(Error::Invalid(format!("iterations ({n_iter}) must exceed burn-in ({burn_in})")));
    }
    let graph = &data.graph;
    let n = data.n_zones() as f64;
    let t_max = data.n_transitions();
    let p = data.n_covariates();
    let k = BASE_COEFFICIENTS + 2 * p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let v0 = pooled_diff_variance(data);
    let mut params = DynamicsParams {
        c0: 0.0,
        b0: 0.0,
        c1: -1.0,
        b1: 0.0,
        c2: 0.0,
        b2: 0.0,
        beta1: vec![0.0; p],
        beta2: vec![0.0; p],
        sigma_e2: v0,
        sigma_s2: v0,
        rho: 0.9,
    };
    let mut latent = known.cloned().unwrap_or_else(|| data.logit_prevalence.clone());
    let mut log_det = car_log_det(graph, params.rho)?;
    let mut log_step: f64 = 0.0;
    let mut accepted_after_burn_in = 0usize;
    let mut draws = Vec::with_capacity(n_iter - burn_in);
    let mut trace = Vec::with_capacity(n_iter);

    for iter in 0..n_iter {
        // regression coefficients
        let (precision, mean) = coefficient_conditional(data, &latent, params.sigma_s2, params.rho, prior);
        let chol = precision.cholesky().ok_or(Error::NonFinite { iteration: iter })?;
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = mean + chol.l().transpose().solve_upper_triangular(&z).ok_or(Error::NonFinite { iteration: iter })?;
        params.set_coefficients(theta.as_slice());

        // variances
        let resid: f64 = (data.logit_prevalence.clone() - &latent).iter().map(|v| v * v).sum();
        params.sigma_e2 = inverse_gamma(&mut rng, prior.var_shape + 0.5 * n * (t_max as f64 + 1.0), prior.var_rate + 0.5 * resid);
        let innov = innovations(data, &latent, theta.as_slice());
        let (sum_m, sum_g) = innov.iter().map(|r| car_parts(graph, r)).fold((0.0, 0.0), |acc, (m, g)| (acc.0 + m, acc.1 + g));
        let quad = (sum_m - params.rho * sum_g).max(0.0);
        params.sigma_s2 = inverse_gamma(&mut rng, prior.var_shape + 0.5 * n * t_max as f64, prior.var_rate + 0.5 * quad);

        // spatial dependence
        let target = |rho: f64, log_det: f64| -> f64 {
            0.5 * t_max as f64 * log_det - 0.5 * (sum_m - rho * sum_g) / params.sigma_s2 + rho.ln() + (1.0 - rho).ln()
        };
        let proposal = inv_logit(logit(params.rho) + log_step.exp() * rng.sample::<f64, _>(StandardNormal));
        let mut accept = false;
        if proposal > 0.0 && proposal < 1.0 {
            let proposal_log_det = car_log_det(graph, proposal)?;
            let log_ratio = target(proposal, proposal_log_det) - target(params.rho, log_det);
            if log_ratio.is_nan() {
                return Err(Error::NonFinite { iteration: iter });
            }
            if rng.gen::<f64>().ln() < log_ratio {
                params.rho = proposal;
                log_det = proposal_log_det;
                accept = true;
            }
        }
        if iter < burn_in {
            log_step += ((accept as u8 as f64) - 0.44) / (iter as f64 + 1.0).powf(0.6);
        } else if accept {
            accepted_after_burn_in += 1;
        }

        // latent slices
        for t in (0..=t_max).filter(|_| known.is_none()) {
            let slice = draw_latent_slice(data, &latent, &params, prior, t, &mut rng)?;
            if slice.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { iteration: iter });
            }
            latent.set_column(t, &DVector::from_vec(slice));
        }

        let lp = log_posterior(data, &latent, &params, prior)?;
        if !lp.is_finite() {
            return Err(Error::NonFinite { iteration: iter });
        }
        trace.push(lp);
        if iter >= burn_in {
            draws.push(PosteriorDraw { params: params.clone(), latent: latent.clone() });
        }
    }
    let kept = n_iter - burn_in;
    Ok(PosteriorDraws {
        draws,
        n_iter,
        burn_in,
        seed,
        acceptance_rate_rho: accepted_after_burn_in as f64 / kept as f64,
        rho_step: log_step.exp(),
        log_posterior: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_panel, Dynamics, Noise, ScenarioKind, ScenarioSpec};

    fn small_panel() -> PanelData {
        let g = ZoneGraph::new(vec!["a".into(), "b".into()], vec![1.0, 1.0], &[(0, 1)]).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[0.3, -0.4]);
        let y = DMatrix::from_row_slice(2, 3, &[0.1, 0.35, 0.5, -0.2, 0.05, 0.1]);
        let a = DMatrix::from_row_slice(2, 2, &[0.2, 0.6, 0.4, 0.1]);
        PanelData::new(g, x, y, a, vec![0, 1, 2]).unwrap()
    }

    #[test]
    fn design_reproduces_dynamics_mean() {
        let spec = ScenarioSpec::standard(ScenarioKind::CorrectSpec);
        let sim = simulate_panel(&spec, 3).unwrap();
        let data = &sim.data;
        let params = DynamicsParams::simulation_truth();
        let dynamics = Dynamics::new(&data.graph, params.clone()).unwrap();
        let eta = data.y(2);
        let a = data.a(3);
        let expected = dynamics.step(&eta, &a, &data.covariates, Noise::Zero).unwrap();
        let got = combine(&design_columns(&data.graph, &eta, &a, &data.covariates), &params.coefficients());
        for (e, g) in expected.iter().zip(&got) {
            assert!((e - g).abs() < 1e-12);
        }
    }

    #[test]
    fn sandwich_matches_dense_product() {
        let g = ZoneGraph::grid(3, 4).unwrap();
        let params = DynamicsParams::simulation_truth();
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let w = propagator(&g, &params, &a).unwrap();
        let wd = w.to_dense(&g);
        let q = g.car_structure(0.7).to_dense();
        let expected = wd.transpose() * q * wd * 2.0;
        let (diag, entries) = sandwich(&g, &w, 0.7, 2.0);
        let got = SparseSym::from_entries(diag, entries).to_dense();
        assert!((expected - got).abs().max() < 1e-12);
    }

    #[test]
    fn single_year_is_rejected() {
        let data = small_panel().truncated(1).unwrap();
        let err = gibbs_fit(&data, &PriorSpec::default(), GibbsConfig { n_iter: 10, burn_in: 2, seed: 1 }).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn bookkeeping_and_rho_domain() {
        let sim = simulate_panel(&ScenarioSpec::standard(ScenarioKind::CorrectSpec), 5).unwrap();
        let draws = gibbs_fit(&sim.data, &PriorSpec::default(), GibbsConfig { n_iter: 60, burn_in: 20, seed: 9 }).unwrap();
        assert_eq!(draws.n_kept(), 40);
        assert_eq!(draws.log_posterior.len(), 60);
        for d in &draws.draws {
            d.params.validate().unwrap();
            assert!(d.params.rho > 0.0 && d.params.rho < 1.0);
        }
        assert!((0.0..=1.0).contains(&draws.acceptance_rate_rho));
    }

    #[test]
    fn thinning_and_summary() {
        let data = small_panel();
        let draws = gibbs_fit(&data, &PriorSpec::default(), GibbsConfig { n_iter: 30, burn_in: 10, seed: 2 }).unwrap();
        let thin = thin_draws(&draws, 5, 4).unwrap();
        assert_eq!(thin.n_kept(), 5);
        assert!(thin_draws(&draws, 21, 4).is_err());
        let all = thin_draws(&draws, 20, 4).unwrap();
        assert_eq!(all.draws, draws.draws);
        let summary = posterior_summary(&draws).unwrap();
        assert_eq!(summary.len(), DynamicsParams::column_names(1).len());
        for s in &summary {
            assert!(s.lower <= s.mean && s.mean <= s.upper, "{s:?}");
        }
    }
}
