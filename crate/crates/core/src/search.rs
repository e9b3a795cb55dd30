//! Policy search by Bayesian optimization: a Latin hypercube start, a
//! Gaussian-process surrogate of the loss and expected-improvement proposals.

use argmin::core::{CostFunction, Error as ArgminError, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::PanelData;
use crate::error::{Error, Result};
use crate::inference::PosteriorDraws;
use crate::policy::{PolicyParams, UtilityKind};
use crate::rollout::{rollout_draws, RolloutConfig, RolloutEngine, Rule};
use crate::stats::{normal_cdf, normal_pdf, quantile, substream};

/// Box of policy parameters `[α0, α_1..α_q]` and the evaluation budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub q: usize,
    /// `α_k ∈ [−alpha_bound, alpha_bound]`.
    pub alpha_bound: f64,
    /// `α0 ∈ [0, alpha0_max]`.
    pub alpha0_max: f64,
    pub n_initial: usize,
    pub n_sequential: usize,
}

impl SearchSpace {
    pub fn new(q: usize) -> Self {
        Self { q, alpha_bound: 5.0, alpha0_max: 1.0, n_initial: 100, n_sequential: 50 }
    }

    pub fn dim(&self) -> usize {
        self.q + 1
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(0.0, self.alpha0_max)];
        b.extend(std::iter::repeat((-self.alpha_bound, self.alpha_bound)).take(self.q));
        b
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Invalid("search space needs at least one risk factor".into()));
        }
        if !(self.alpha_bound > 0.0 && self.alpha_bound.is_finite()) || !(self.alpha0_max > 0.0 && self.alpha0_max.is_finite()) {
            return Err(Error::Invalid("search bounds must be positive and finite".into()));
        }
        if self.n_initial < self.q + 2 {
            return Err(Error::Invalid(format!("initial design needs at least q+2 = {} points", self.q + 2)));
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.bounds().iter().zip(x).all(|(&(lo, hi), &v)| v >= lo && v <= hi)
    }
}

/// Latin hypercube on `bounds` with `n` points: one point per stratum in
/// every coordinate, uniformly jittered, best minimum pairwise distance of
/// several random restarts.
pub fn latin_hypercube(bounds: &[(f64, f64)], n: usize, seed: u64) -> DMatrix<f64> {
    const RESTARTS: usize = 20;
    let d = bounds.len();
    let mut rng = substream(seed, 0);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..RESTARTS {
        let mut unit = DMatrix::zeros(n, d);
        for j in 0..d {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng);
            for i in 0..n {
                unit[(i, j)] = (strata[i] as f64 + rng.gen::<f64>()) / n as f64;
            }
        }
        let mut min_dist = f64::INFINITY;
        for a in 0..n {
            for b in a + 1..n {
                let dist = (unit.row(a) - unit.row(b)).norm_squared();
                min_dist = min_dist.min(dist);
            }
        }
        if best.as_ref().map_or(true, |(m, _)| min_dist > *m) {
            best = Some((min_dist, unit));
        }
    }
    let unit = best.expect("at least one restart").1;
    DMatrix::from_fn(n, d, |i, j| bounds[j].0 + unit[(i, j)] * (bounds[j].1 - bounds[j].0))
}

pub fn lhs_design(space: &SearchSpace, seed: u64) -> DMatrix<f64> {
    latin_hypercube(&space.bounds(), space.n_initial, seed)
}

/// `L̃ + 1e−4 Σ α_i²` over all policy parameters including `α0`.
pub fn ridge_loss(point: &[f64], raw: f64) -> f64 {
    raw + 1e-4 * point.iter().map(|v| v * v).sum::<f64>()
}

const MIN_NUGGET: f64 = 1e-8;
const LOG_LENGTH: (f64, f64) = (-4.6, 3.0);
const LOG_SIGNAL: (f64, f64) = (-6.9, 4.6);
const LOG_NUGGET: (f64, f64) = (-18.42, 0.0);

/// Gaussian-process regression with an anisotropic Matérn-5/2 kernel.
/// Inputs are rescaled to the unit box spanned by the training data and
/// outputs are standardized; hyperparameters live on those scales.
#[derive(Debug, Clone)]
pub struct Surrogate {
    x: DMatrix<f64>,
    y: Vec<f64>,
    lower: Vec<f64>,
    width: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    lengthscales: Vec<f64>,
    signal_variance: f64,
    nugget: f64,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

/// Fitted kernel hyperparameters, reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub nugget: f64,
}

fn matern52(u: &[f64], v: &[f64], lengthscales: &[f64], signal: f64) -> f64 {
    let r = u.iter().zip(v).zip(lengthscales).map(|((a, b), l)| ((a - b) / l).powi(2)).sum::<f64>().sqrt();
    let s5r = 5f64.sqrt() * r;
    signal * (1.0 + s5r + 5.0 * r * r / 3.0) * (-s5r).exp()
}

fn kernel_matrix(u: &[Vec<f64>], lengthscales: &[f64], signal: f64, nugget: f64) -> DMatrix<f64> {
    let m = u.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        k[(i, i)] = signal + nugget;
        for j in 0..i {
            let v = matern52(&u[i], &u[j], lengthscales, signal);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

struct Likelihood<'a> {
    u: &'a [Vec<f64>],
    y: &'a DVector<f64>,
}

fn clamp_log(theta: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut clamped = theta.to_vec();
    let mut excess = 0.0;
    for (k, v) in clamped.iter_mut().enumerate() {
        let (lo, hi) = if k < d {
            LOG_LENGTH
        } else if k == d {
            LOG_SIGNAL
        } else {
            LOG_NUGGET
        };
        let c = v.clamp(lo, hi);
        excess += (*v - c).powi(2);
        *v = c;
    }
    (clamped, excess)
}

impl Likelihood<'_> {
    fn negative_log_likelihood(&self, theta: &[f64]) -> f64 {
        let d = self.u[0].len();
        let (theta, excess) = clamp_log(theta, d);
        let lengthscales: Vec<f64> = theta[..d].iter().map(|v| v.exp()).collect();
        let k = kernel_matrix(self.u, &lengthscales, theta[d].exp(), theta[d + 1].exp());
        match k.cholesky() {
            Some(chol) => {
                let alpha = chol.solve(self.y);
                let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
                0.5 * self.y.dot(&alpha) + log_det + 1e3 * excess
            }
            None => 1e10,
        }
    }
}

impl CostFunction for Likelihood<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Self::Param) -> std::result::Result<f64, ArgminError> {
        Ok(self.negative_log_likelihood(theta))
    }
}

fn nelder_mead(objective: Likelihood<'_>, start: Vec<f64>, max_iters: u64) -> (Vec<f64>, f64) {
    let mut simplex = vec![start.clone()];
    for k in 0..start.len() {
        let mut v = start.clone();
        v[k] += 0.5;
        simplex.push(v);
    }
    let fallback = objective.negative_log_likelihood(&start);
    let solver = match NelderMead::new(simplex).with_sd_tolerance(1e-7) {
        Ok(s) => s,
        Err(_) => return (start, fallback),
    };
    match Executor::new(objective, solver).configure(|s| s.max_iters(max_iters)).run() {
        Ok(res) => {
            let state = res.state();
            match state.best_param.clone() {
                Some(p) if state.best_cost.is_finite() && state.best_cost <= fallback => (p, state.best_cost),
                _ => (start, fallback),
            }
        }
        Err(_) => (start, fallback),
    }
}

impl Surrogate {
    /// Fits by maximum marginal likelihood from several starts (plus `warm`
    /// if given). Duplicate input rows are merged by averaging their values.
    pub fn fit(x: &DMatrix<f64>, y: &[f64], warm: Option<&Hyperparameters>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension { context: "surrogate targets", expected: x.nrows(), got: y.len() });
        }
        if x.nrows() < 2 || x.ncols() == 0 {
            return Err(Error::InsufficientData("surrogate needs at least two points".into()));
        }
        let d = x.ncols();
        // merge duplicates
        let mut rows: Vec<(Vec<f64>, f64, usize)> = Vec::new();
        for (i, row) in x.row_iter().enumerate() {
            let r: Vec<f64> = row.iter().copied().collect();
            match rows.iter_mut().find(|(q, _, _)| *q == r) {
                Some(entry) => {
                    entry.1 += y[i];
                    entry.2 += 1;
                }
                None => rows.push((r, y[i], 1)),
            }
        }
        let m = rows.len();
        let xs = DMatrix::from_fn(m, d, |i, j| rows[i].0[j]);
        let ys: Vec<f64> = rows.iter().map(|(_, s, c)| s / *c as f64).collect();
        let lower: Vec<f64> = (0..d).map(|j| xs.column(j).min()).collect();
        let width: Vec<f64> = (0..d)
            .map(|j| {
                let w = xs.column(j).max() - lower[j];
                if w > 0.0 { w } else { 1.0 }
            })
            .collect();
        let u: Vec<Vec<f64>> = (0..m).map(|i| (0..d).map(|j| (xs[(i, j)] - lower[j]) / width[j]).collect()).collect();
        let y_mean = ys.iter().sum::<f64>() / m as f64;
        let sd = (ys.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        let y_scale = if sd > 0.0 { sd } else { 1e-12 };
        let ystd = DVector::from_iterator(m, ys.iter().map(|v| (v - y_mean) / y_scale));

        let mut starts: Vec<Vec<f64>> = Vec::new();
        if let Some(h) = warm {
            if h.lengthscales.len() == d {
                let mut s: Vec<f64> = h.lengthscales.iter().map(|v| v.ln()).collect();
                s.push(h.signal_variance.ln());
                s.push(h.nugget.ln());
                starts.push(s);
            }
        }
        for (l, g) in [(0.3f64, 1e-2f64), (1.0, 1e-4)] {
            let mut s = vec![l.ln(); d];
            s.push(0.0);
            s.push(g.ln());
            starts.push(s);
        }
        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in starts {
            let (theta, cost) = nelder_mead(Likelihood { u: &u, y: &ystd }, s, 300);
            if best.as_ref().map_or(true, |(_, c)| cost < *c) {
                best = Some((theta, cost));
            }
        }
        let (theta, _) = clamp_log(&best.expect("at least one start").0, d);
        let lengthscales: Vec<f64> = theta[..d].iter().map(|v| v.exp()).collect();
        let signal_variance = theta[d].exp();
        let mut nugget = theta[d + 1].exp().max(MIN_NUGGET);
        // escalate the nugget until the kernel factors
        let chol = loop {
            if let Some(c) = kernel_matrix(&u, &lengthscales, signal_variance, nugget).cholesky() {
                break c;
            }
            nugget *= 10.0;
            if nugget > signal_variance {
                return Err(Error::NotPositiveDefinite { pivot: 0 });
            }
        };
        let weights = chol.solve(&ystd);
        Ok(Self { x: xs, y: ys, lower, width, y_mean, y_scale, lengthscales, signal_variance, nugget, chol, weights })
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters { lengthscales: self.lengthscales.clone(), signal_variance: self.signal_variance, nugget: self.nugget }
    }

    /// Nugget in the units of the training values' variance.
    pub fn nugget_variance(&self) -> f64 {
        self.nugget * self.y_scale * self.y_scale
    }

    pub fn n_points(&self) -> usize {
        self.y.len()
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    fn scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.lower).zip(&self.width).map(|((v, lo), w)| (v - lo) / w).collect()
    }

    /// Predictive mean and variance of the latent loss surface at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let u = self.scale(x);
        let m = self.n_points();
        let kstar = DVector::from_fn(m, |i, _| {
            let ui: Vec<f64> = (0..u.len()).map(|j| (self.x[(i, j)] - self.lower[j]) / self.width[j]).collect();
            matern52(&u, &ui, &self.lengthscales, self.signal_variance)
        });
        let mean = self.y_mean + self.y_scale * kstar.dot(&self.weights);
        let v = self.chol.l().solve_lower_triangular(&kstar).expect("triangular factor");
        let var = (self.signal_variance - v.norm_squared()).max(0.0) * self.y_scale * self.y_scale;
        (mean, var)
    }

    pub fn expected_improvement(&self, x: &[f64], f_min: f64) -> f64 {
        let (mu, var) = self.predict(x);
        expected_improvement(mu, var.sqrt(), f_min)
    }
}

pub fn fit_surrogate(x: &DMatrix<f64>, y: &[f64]) -> Result<Surrogate> {
    Surrogate::fit(x, y, None)
}

/// Expected improvement below `f_min` for a Normal(`mu`, `sigma²`) prediction.
pub fn expected_improvement(mu: f64, sigma: f64, f_min: f64) -> f64 {
    if !(sigma > 0.0) {
        return (f_min - mu).max(0.0);
    }
    let z = (f_min - mu) / sigma;
    ((f_min - mu) * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// One evaluated point of a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub point: Vec<f64>,
    pub loss: f64,
    pub loss_se: f64,
    pub is_initial: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_point: Vec<f64>,
    pub best_loss: f64,
    pub trace: Vec<TraceRow>,
}

fn argmin_trace(trace: &[TraceRow]) -> &TraceRow {
    trace.iter().fold(&trace[0], |best, r| if r.loss < best.loss { r } else { best })
}

/// Candidate maximizing EI: uniform random candidates, then a coordinate
/// pattern search from the best few.
fn propose<R: Rng>(s: &Surrogate, bounds: &[(f64, f64)], f_min: f64, rng: &mut R, taken: &[Vec<f64>]) -> Vec<f64> {
    const CANDIDATES: usize = 1000;
    const POLISHED: usize = 10;
    let d = bounds.len();
    let mut cands: Vec<(f64, Vec<f64>)> = (0..CANDIDATES)
        .map(|_| {
            let x: Vec<f64> = bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect();
            (s.expected_improvement(&x, f_min), x)
        })
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut polished: Vec<(f64, Vec<f64>)> = Vec::with_capacity(POLISHED);
    for (ei0, x0) in cands.iter().take(POLISHED) {
        let mut x = x0.clone();
        let mut ei = *ei0;
        let mut step: Vec<f64> = bounds.iter().map(|&(lo, hi)| 0.1 * (hi - lo)).collect();
        for _ in 0..40 {
            let mut improved = false;
            for j in 0..d {
                for dir in [1.0, -1.0] {
                    let mut y = x.clone();
                    y[j] = (y[j] + dir * step[j]).clamp(bounds[j].0, bounds[j].1);
                    let e = s.expected_improvement(&y, f_min);
                    if e > ei {
                        ei = e;
                        x = y;
                        improved = true;
                    }
                }
            }
            if !improved {
                step.iter_mut().for_each(|v| *v *= 0.5);
                if step.iter().zip(bounds).all(|(v, &(lo, hi))| *v < 1e-4 * (hi - lo)) {
                    break;
                }
            }
        }
        polished.push((ei, x));
    }
    polished.extend(cands.into_iter().skip(POLISHED));
    polished.sort_by(|a, b| b.0.total_cmp(&a.0));
    let is_taken = |x: &[f64]| {
        taken.iter().any(|t| t.iter().zip(x).zip(bounds).all(|((a, b), &(lo, hi))| (a - b).abs() <= 1e-9 * (hi - lo)))
    };
    polished
        .into_iter()
        .map(|(_, x)| x)
        .find(|x| !is_taken(x))
        .unwrap_or_else(|| bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
}

/// Minimizes a noisy objective over the search box. `objective` returns the
/// value and its standard error.
pub fn minimize<F>(space: &SearchSpace, seed: u64, mut objective: F) -> Result<SearchResult>
where
    F: FnMut(&[f64]) -> Result<(f64, f64)>,
{
    space.validate()?;
    let bounds = space.bounds();
    let design = lhs_design(space, seed);
    let mut trace: Vec<TraceRow> = Vec::with_capacity(space.n_initial + space.n_sequential);
    for i in 0..design.nrows() {
        let point: Vec<f64> = design.row(i).iter().copied().collect();
        let (loss, loss_se) = objective(&point)?;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("objective is not finite at {point:?}")));
        }
        trace.push(TraceRow { iter: i, point, loss, loss_se, is_initial: true });
    }
    let mut warm: Option<Hyperparameters> = None;
    for k in 0..space.n_sequential {
        let x = DMatrix::from_fn(trace.len(), space.dim(), |i, j| trace[i].point[j]);
        let y: Vec<f64> = trace.iter().map(|r| r.loss).collect();
        let surrogate = Surrogate::fit(&x, &y, warm.as_ref())?;
        warm = Some(surrogate.hyperparameters());
        let f_min = argmin_trace(&trace).loss;
        let mut rng = substream(seed, 1 + k as u64);
        let taken: Vec<Vec<f64>> = trace.iter().map(|r| r.point.clone()).collect();
        let point = propose(&surrogate, &bounds, f_min, &mut rng, &taken);
        let (loss, loss_se) = objective(&point)?;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("objective is not finite at {point:?}")));
        }
        trace.push(TraceRow { iter: trace.len(), point, loss, loss_se, is_initial: false });
    }
    let best = argmin_trace(&trace);
    Ok(SearchResult { best_point: best.point.clone(), best_loss: best.loss, trace })
}

/// Searches policy weights for one utility kind against a prepared rollout
/// engine; the objective is the ridge-stabilized loss estimate.
pub fn optimize_with_engine(engine: &RolloutEngine<'_>, kind: UtilityKind, space: &SearchSpace, seed: u64) -> Result<(PolicyParams, SearchResult)> {
    if space.q != engine.config().factors.len() {
        return Err(Error::Dimension { context: "search dimension vs risk factors", expected: engine.config().factors.len(), got: space.q });
    }
    let result = minimize(space, seed, |point| {
        let policy = PolicyParams::from_point(point, kind)?;
        let est = engine.estimate(Rule::Policy(&policy))?;
        Ok((ridge_loss(point, est.mean), est.std_error))
    })?;
    Ok((PolicyParams::from_point(&result.best_point, kind)?, result))
}

pub fn optimize_policy(
    draws: &PosteriorDraws,
    data: &PanelData,
    config: &RolloutConfig,
    kind: UtilityKind,
    space: &SearchSpace,
    seed: u64,
) -> Result<(PolicyParams, SearchResult)> {
    let starts = rollout_draws(draws)?;
    let engine = RolloutEngine::new(&data.graph, &data.covariates, &starts, config.clone())?;
    optimize_with_engine(&engine, kind, space, seed)
}

/// One optimized policy per posterior draw, each search using only that
/// draw in its rollouts. Rows are `[α0, α_1..α_q]`.
pub fn posterior_of_alpha(
    draws: &PosteriorDraws,
    data: &PanelData,
    config: &RolloutConfig,
    kind: UtilityKind,
    space: &SearchSpace,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let starts = rollout_draws(draws)?;
    let mut out = DMatrix::zeros(starts.len(), space.dim());
    for (i, start) in starts.iter().enumerate() {
        let engine = RolloutEngine::new(&data.graph, &data.covariates, std::slice::from_ref(start), config.clone())?;
        let (policy, _) = optimize_with_engine(&engine, kind, space, seed.wrapping_add(i as u64))?;
        for (j, v) in policy.to_point().into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Quantile levels reported for the optimized-weight posterior.
pub const ALPHA_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Per-coordinate quantiles of the rows of `samples`.
pub fn column_quantiles(samples: &DMatrix<f64>) -> Vec<[f64; 5]> {
    (0..samples.ncols())
        .map(|j| {
            let col: Vec<f64> = samples.column(j).iter().copied().collect();
            ALPHA_QUANTILES.map(|q| quantile(&col, q))
        })
        .collect()
}
