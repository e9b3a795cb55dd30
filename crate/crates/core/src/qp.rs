//! Budget-constrained allocation QP.
//!
//! Solves
//!
//! ```text
//! minimize   ½ aᵀ H a + cᵀ a
//! subject to 0 ≤ a ≤ u,  Σ w_l a_l ≤ C
//! ```
//!
//! where `H = 2 diag(h) + 2 α0 L` (`L` the graph Laplacian, `h ≥ 0`) and the
//! weights `w` are population shares summing to one. The budget is handled
//! by a safeguarded Newton search on its multiplier; each trial multiplier
//! leaves a box-constrained problem solved by projected Newton on the sparse
//! free block. Accelerated projected gradient is kept as a fallback and as an
//! independent route for testing.

use crate::error::{Error, Result};
use crate::graph::ZoneGraph;
use crate::sparse::{reverse_cuthill_mckee, SparseCholesky};

/// A concave allocation problem in minimization form.
#[derive(Debug, Clone)]
pub struct AllocationQp<'g> {
    pub graph: &'g ZoneGraph,
    /// Curvature `h_l ≥ 0` on each zone (`p_l` for quadratic utility, 0 for linear).
    pub curvature: Vec<f64>,
    /// Linear term `c`.
    pub linear: Vec<f64>,
    pub alpha0: f64,
    /// Upper bounds, 0 for zones excluded from receiving resources.
    pub upper: Vec<f64>,
    /// Budget weights `N_l / Σ N`.
    pub weights: Vec<f64>,
    pub budget: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub a: Vec<f64>,
    pub objective: f64,
    /// Budget multiplier.
    pub lambda: f64,
    /// Max violation of the KKT stationarity/complementarity conditions.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub method: QpMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMethod {
    Separable,
    ActiveSet,
    ProjectedGradient,
}

const KKT_TOL: f64 = 1e-8;

impl<'g> AllocationQp<'g> {
    pub fn n(&self) -> usize {
        self.linear.len()
    }

    /// `H x`
    pub fn hess_mul(&self, x: &[f64]) -> Vec<f64> {
        let g = self.graph;
        (0..self.n())
            .map(|l| {
                let lap: f64 = g.neighbors(l).iter().map(|&j| x[l] - x[j]).sum();
                2.0 * self.curvature[l] * x[l] + 2.0 * self.alpha0 * lap
            })
            .collect()
    }

    pub fn objective(&self, a: &[f64]) -> f64 {
        let ha = self.hess_mul(a);
        a.iter().zip(&ha).zip(&self.linear).map(|((ai, hi), ci)| 0.5 * ai * hi + ci * ai).sum()
    }

    pub fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let mut g = self.hess_mul(a);
        g.iter_mut().zip(&self.linear).for_each(|(gi, ci)| *gi += ci);
        g
    }

    fn budget_used(&self, a: &[f64]) -> f64 {
        a.iter().zip(&self.weights).map(|(x, w)| x * w).sum()
    }

    /// Largest eigenvalue bound of `H` (Gershgorin).
    pub fn lipschitz(&self) -> f64 {
        (0..self.n())
            .map(|l| 2.0 * self.curvature[l] + 4.0 * self.alpha0 * self.graph.degree(l) as f64)
            .fold(0.0, f64::max)
            .max(1e-12)
    }

    /// Max KKT violation of `a` with budget multiplier `lambda`.
    pub fn kkt_residual(&self, a: &[f64], lambda: f64) -> f64 {
        let g = self.gradient(a);
        let mut r: f64 = 0.0;
        for l in 0..self.n() {
            let gl = g[l] + lambda * self.weights[l];
            // projected-gradient residual: a = clip(a − g, 0, u) at optimality
            let proj = (a[l] - gl).clamp(0.0, self.upper[l]);
            r = r.max((proj - a[l]).abs());
            r = r.max((a[l] - a[l].clamp(0.0, self.upper[l])).abs());
        }
        let slack = self.budget - self.budget_used(a);
        r = r.max((-slack).max(0.0));
        r = r.max((lambda * slack).abs());
        r = r.max((-lambda).max(0.0));
        r
    }

    /// Best budget multiplier for `a`: least squares on the free coordinates.
    pub fn estimate_lambda(&self, a: &[f64]) -> f64 {
        let slack = self.budget - self.budget_used(a);
        if slack > 1e-9 {
            return 0.0;
        }
        let g = self.gradient(a);
        let (mut num, mut den) = (0.0, 0.0);
        for l in 0..self.n() {
            if a[l] > 1e-9 && a[l] < self.upper[l] - 1e-9 {
                num -= g[l] * self.weights[l];
                den += self.weights[l] * self.weights[l];
            }
        }
        if den > 0.0 {
            return (num / den).max(0.0);
        }
        // all coordinates at bounds: smallest multiplier consistent with the signs
        let mut lo: f64 = 0.0;
        let mut hi = f64::INFINITY;
        for l in 0..self.n() {
            if self.weights[l] <= 0.0 || self.upper[l] <= 0.0 {
                continue;
            }
            let ratio = -g[l] / self.weights[l];
            if a[l] >= self.upper[l] - 1e-9 {
                hi = hi.min(ratio);
            } else {
                lo = lo.max(ratio);
            }
        }
        if hi.is_finite() { lo.min(hi).max(0.0) } else { lo }
    }

    /// Exact solution when `α0 = 0`: the problem separates by zone.
    pub fn solve_separable(&self) -> QpSolution {
        debug_assert!(self.alpha0 == 0.0);
        let n = self.n();
        let mut a = vec![0.0; n];
        let full: f64 = (0..n).map(|l| self.upper[l] * self.weights[l]).sum();
        let mut lambda = 0.0;
        // zones whose unconstrained optimum is interior or at the upper bound
        let unconstrained: Vec<f64> = (0..n)
            .map(|l| {
                if self.upper[l] <= 0.0 {
                    0.0
                } else if self.curvature[l] > 0.0 {
                    (-self.linear[l] / (2.0 * self.curvature[l])).clamp(0.0, self.upper[l])
                } else if self.linear[l] < 0.0 {
                    self.upper[l]
                } else {
                    0.0
                }
            })
            .collect();
        if full <= self.budget || self.budget_used(&unconstrained) <= self.budget {
            a = unconstrained;
        } else if self.curvature.iter().all(|&h| h == 0.0) {
            // fractional knapsack: fill by value per unit of budget, lower index first on ties
            let mut order: Vec<usize> = (0..n).filter(|&l| self.upper[l] > 0.0 && self.linear[l] < 0.0).collect();
            order.sort_by(|&i, &j| {
                let ri = -self.linear[i] / self.weights[i];
                let rj = -self.linear[j] / self.weights[j];
                rj.total_cmp(&ri).then(i.cmp(&j))
            });
            let mut left = self.budget;
            for l in order {
                if left <= 0.0 {
                    break;
                }
                let take = (left / self.weights[l]).min(self.upper[l]);
                a[l] = take;
                left -= take * self.weights[l];
                lambda = -self.linear[l] / self.weights[l];
            }
        } else {
            lambda = self.water_fill(&mut a);
        }
        let objective = self.objective(&a);
        let kkt_residual = self.kkt_residual(&a, lambda);
        QpSolution { a, objective, lambda, kkt_residual, iterations: 0, method: QpMethod::Separable }
    }

    /// Water-filling for strictly positive curvature: `a_l(λ) = clip((−c_l − λ w_l)/(2h_l), 0, u_l)`,
    /// with λ chosen exactly on the piecewise-linear budget curve.
    fn water_fill(&self, a: &mut [f64]) -> f64 {
        let n = self.n();
        let alloc = |lambda: f64, l: usize| -> f64 {
            if self.upper[l] <= 0.0 {
                return 0.0;
            }
            if self.curvature[l] > 0.0 {
                ((-self.linear[l] - lambda * self.weights[l]) / (2.0 * self.curvature[l])).clamp(0.0, self.upper[l])
            } else if -self.linear[l] - lambda * self.weights[l] > 0.0 {
                self.upper[l]
            } else {
                0.0
            }
        };
        let used = |lambda: f64| -> f64 { (0..n).map(|l| self.weights[l] * alloc(lambda, l)).sum() };
        // breakpoints where a zone leaves its upper bound or reaches zero
        let mut breaks: Vec<f64> = Vec::with_capacity(2 * n);
        for l in 0..n {
            if self.upper[l] <= 0.0 || self.weights[l] <= 0.0 {
                continue;
            }
            breaks.push(-self.linear[l] / self.weights[l]);
            if self.curvature[l] > 0.0 {
                breaks.push((-self.linear[l] - 2.0 * self.curvature[l] * self.upper[l]) / self.weights[l]);
            }
        }
        breaks.retain(|&b| b > 0.0);
        breaks.push(0.0);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        // used() is non-increasing; find the segment [lo, hi] containing the budget
        let mut lo = 0.0;
        let mut hi = *breaks.last().unwrap();
        for w in breaks.windows(2) {
            if used(w[1]) <= self.budget {
                lo = w[0];
                hi = w[1];
                break;
            }
        }
        let (ulo, uhi) = (used(lo), used(hi));
        let lambda = if (ulo - uhi).abs() < 1e-300 { lo } else { lo + (ulo - self.budget) * (hi - lo) / (ulo - uhi) };
        for l in 0..n {
            a[l] = alloc(lambda, l);
        }
        // remove rounding excess
        let excess = self.budget_used(a) - self.budget;
        if excess > 0.0 {
            let scale = self.budget / self.budget_used(a);
            a.iter_mut().for_each(|v| *v *= scale);
        }
        lambda
    }

    /// Box-constrained subproblem at a fixed budget multiplier, solved by
    /// projected Newton with an Armijo search along the projection arc.
    /// Returns the minimizer and the slope `d(wᵀa)/dλ` on its active-set
    /// piece, or `None` if it fails to converge.
    fn solve_box(&self, lambda: f64, warm: &[f64], rank: &[usize], max_iter: usize) -> Option<(Vec<f64>, f64)> {
        let n = self.n();
        let clip = |v: f64, l: usize| v.clamp(0.0, self.upper[l]);
        let mut a: Vec<f64> = (0..n).map(|l| clip(warm[l], l)).collect();
        for _ in 0..max_iter {
            let mut g = self.regularized_gradient(&a);
            g.iter_mut().zip(&self.weights).for_each(|(gi, wi)| *gi += lambda * wi);
            let residual = (0..n).map(|l| (a[l] - clip(a[l] - g[l], l)).abs()).fold(0.0, f64::max);
            let eps = residual.min(1e-3);
            let binding: Vec<bool> = (0..n)
                .map(|l| {
                    self.upper[l] <= 0.0
                        || (a[l] <= eps && g[l] > 0.0)
                        || (a[l] >= self.upper[l] - eps && g[l] < 0.0)
                })
                .collect();
            let mut free: Vec<usize> = (0..n).filter(|&l| !binding[l]).collect();
            free.sort_by_key(|&l| rank[l]);
            let chol = if free.is_empty() { None } else { Some(self.factor_free(&free).ok()?) };
            if residual <= 1e-13 {
                let slope = self.slope(chol.as_ref(), &free);
                return Some((a, slope));
            }
            let mut d = vec![0.0; n];
            if let Some(c) = &chol {
                let gf: Vec<f64> = free.iter().map(|&l| -g[l]).collect();
                for (k, v) in c.solve(&gf).into_iter().enumerate() {
                    d[free[k]] = v;
                }
            }
            let diag = self.lipschitz();
            for l in 0..n {
                if binding[l] {
                    d[l] = -g[l] / diag;
                }
            }
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = (0..n).map(|l| clip(a[l] + step * d[l], l)).collect();
                let decrease: f64 = (0..n)
                    .map(|l| if binding[l] { g[l] * (a[l] - trial[l]) } else { -step * g[l] * d[l] })
                    .sum();
                // exact change of a quadratic, free of cancellation
                let delta: Vec<f64> = trial.iter().zip(&a).map(|(t, x)| t - x).collect();
                let hd = self.regularized_hess_mul(&delta);
                let change: f64 = (0..n).map(|l| delta[l] * (g[l] + 0.5 * hd[l])).sum();
                if -change >= 1e-4 * decrease {
                    a = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // near the rounding floor the sufficient-decrease test is
                // unreliable; take the full step if it shrinks the residual
                let trial: Vec<f64> = (0..n).map(|l| clip(a[l] + d[l], l)).collect();
                let mut gt = self.regularized_gradient(&trial);
                gt.iter_mut().zip(&self.weights).for_each(|(gi, wi)| *gi += lambda * wi);
                let rt = (0..n).map(|l| (trial[l] - clip(trial[l] - gt[l], l)).abs()).fold(0.0, f64::max);
                if rt < residual && residual < 1e-6 {
                    a = trial;
                    continue;
                }
                eprintln!("stall {residual:e} {rt:e} free {}", free.len());
                return (residual <= 1e-9).then(|| (a, self.slope(chol.as_ref(), &free)));
            }
        }
        None
    }

    /// `−w_Fᵀ H_FF⁻¹ w_F`, the rate of change of the used budget in the multiplier.
    fn slope(&self, chol: Option<&SparseCholesky>, free: &[usize]) -> f64 {
        match chol {
            Some(c) => {
                let wf: Vec<f64> = free.iter().map(|&l| self.weights[l]).collect();
                -c.solve(&wf).iter().zip(&wf).map(|(x, w)| x * w).sum::<f64>()
            }
            None => 0.0,
        }
    }

    fn ridge(&self) -> f64 {
        // keeps the Hessian nonsingular when the utility is linear
        if self.curvature.iter().any(|&h| h <= 0.0) { 1e-10 } else { 0.0 }
    }

    fn regularized_hess_mul(&self, x: &[f64]) -> Vec<f64> {
        let r = 2.0 * self.ridge();
        let mut h = self.hess_mul(x);
        h.iter_mut().zip(x).for_each(|(hi, xi)| *hi += r * xi);
        h
    }

    fn regularized_gradient(&self, a: &[f64]) -> Vec<f64> {
        let mut g = self.regularized_hess_mul(a);
        g.iter_mut().zip(&self.linear).for_each(|(gi, ci)| *gi += ci);
        g
    }

    /// Cholesky factor of the Hessian restricted to `free`, factored in the
    /// given order (which should follow a bandwidth-reducing ordering).
    fn factor_free(&self, free: &[usize]) -> Result<SparseCholesky> {
        let mut position = vec![usize::MAX; self.n()];
        for (k, &l) in free.iter().enumerate() {
            position[l] = k;
        }
        let ridge = self.ridge();
        let off = -2.0 * self.alpha0;
        let position = &position;
        SparseCholesky::factor_rows(
            (0..free.len()).collect(),
            |k| {
                let l = free[k];
                2.0 * (self.curvature[l] + ridge) + 2.0 * self.alpha0 * self.graph.degree(l) as f64
            },
            |k| {
                self.graph.neighbors(free[k]).iter().filter_map(move |&j| {
                    let pj = position[j];
                    (pj != usize::MAX).then_some((pj, off))
                })
            },
        )
    }

    /// Active-set solve of the full problem: safeguarded Newton search for the
    /// budget multiplier (the used budget is monotone and piecewise linear in
    /// it) around exact box-constrained solves.
    pub fn solve_active_set(&self, warm: &[f64], warm_lambda: f64, max_iter: usize) -> Option<QpSolution> {
        let inner_iter = 50;
        let mut rank = vec![0; self.n()];
        for (k, l) in reverse_cuthill_mckee(&self.graph.laplacian()).into_iter().enumerate() {
            rank[l] = k;
        }
        let (mut a, mut slope) = self.solve_box(0.0, warm, &rank, inner_iter)?;
        let mut lambda = 0.0;
        let mut evaluations = 1;
        if self.budget_used(&a) > self.budget {
            let mut lo = 0.0;
            let mut hi = (0..self.n())
                .filter(|&l| self.upper[l] > 0.0 && self.weights[l] > 0.0)
                .map(|l| -self.linear[l] / self.weights[l])
                .fold(0.0, f64::max)
                * (1.0 + 1e-12)
                + 1e-300;
            let mut feasible = vec![0.0; self.n()];
            let mut feasible_lambda = hi;
            let mut over = a.clone();
            let mut excess = self.budget_used(&a) - self.budget;
            let mut next = if warm_lambda > lo && warm_lambda < hi { warm_lambda } else { 0.5 * (lo + hi) };
            let mut widths = [hi - lo; 5];
            for iter in 0..max_iter {
                let (na, ns) = self.solve_box(next, &a, &rank, inner_iter)?;
                evaluations += 1;
                a = na;
                slope = ns;
                lambda = next;
                excess = self.budget_used(&a) - self.budget;
                if excess > 0.0 {
                    lo = lambda;
                    over.clone_from(&a);
                } else {
                    hi = lambda;
                    feasible.clone_from(&a);
                    feasible_lambda = lambda;
                }
                if excess.abs() <= 1e-13 || hi - lo <= 1e-12 * hi.max(1.0) {
                    break;
                }
                next = if slope < 0.0 { lambda - excess / slope } else { f64::NAN };
                // bisect when Newton steps stop halving the bracket
                let stalled = iter >= 4 && hi - lo > 0.5 * widths[0];
                widths.rotate_left(1);
                widths[4] = hi - lo;
                if stalled || !(next > lo && next < hi) {
                    next = 0.5 * (lo + hi);
                }
            }
            if excess.abs() > 1e-13 {
                // the budget curve jumps at the multiplier: both sides minimize
                // the Lagrangian there, so the blend meeting the budget is optimal
                let used_over = self.budget_used(&over);
                let used_under = self.budget_used(&feasible);
                let theta = if used_over > used_under {
                    ((self.budget - used_under) / (used_over - used_under)).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                a = over.iter().zip(&feasible).map(|(o, f)| theta * o + (1.0 - theta) * f).collect();
                lambda = feasible_lambda;
            }
        }
        let _ = slope;
        let kkt = self.kkt_residual(&a, lambda);
        if !(kkt <= KKT_TOL) {
            return None;
        }
        let objective = self.objective(&a);
        Some(QpSolution { a, objective, lambda, kkt_residual: kkt, iterations: evaluations, method: QpMethod::ActiveSet })
    }

    /// Euclidean projection onto `{0 ≤ a ≤ u, wᵀa ≤ C}`.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        let clip = |mu: f64| -> Vec<f64> {
            y.iter().zip(&self.upper).zip(&self.weights).map(|((yi, ui), wi)| (yi - mu * wi).clamp(0.0, *ui)).collect()
        };
        let a0 = clip(0.0);
        if self.budget_used(&a0) <= self.budget {
            return a0;
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        while self.budget_used(&clip(hi)) > self.budget {
            hi *= 2.0;
            if hi > 1e300 {
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.budget_used(&clip(mid)) > self.budget {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi.max(1.0) {
                break;
            }
        }
        clip(hi)
    }

    /// Accelerated projected gradient with adaptive restart and step `1/L`.
    pub fn solve_projected_gradient(&self, warm: &[f64], tol: f64, max_iter: usize) -> Result<QpSolution> {
        let step = 1.0 / self.lipschitz();
        let mut x = self.project(warm);
        let mut y = x.clone();
        let mut t: f64 = 1.0;
        let mut f_prev = self.objective(&x);
        for iter in 1..=max_iter {
            let g = self.gradient(&y);
            let trial: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
            let x_next = self.project(&trial);
            let change = x_next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let f_next = self.objective(&x_next);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            if f_next > f_prev {
                // restart momentum
                y = x_next.clone();
                t = 1.0;
            } else {
                let beta = (t - 1.0) / t_next;
                y = x_next.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
                t = t_next;
            }
            x = x_next;
            f_prev = f_next;
            if change < tol {
                let lambda = self.estimate_lambda(&x);
                return Ok(QpSolution {
                    objective: self.objective(&x),
                    kkt_residual: self.kkt_residual(&x, lambda),
                    a: x,
                    lambda,
                    iterations: iter,
                    method: QpMethod::ProjectedGradient,
                });
            }
        }
        let lambda = self.estimate_lambda(&x);
        Err(Error::NoConvergence { iterations: max_iter, residual: self.kkt_residual(&x, lambda) })
    }

    /// Solves the QP: separable closed form when `α0 = 0`, otherwise the
    /// active-set method warm-started from the separable solution, falling
    /// back to projected gradient.
    pub fn solve(&self) -> Result<QpSolution> {
        let separable = {
            let mut sep = self.clone();
            sep.alpha0 = 0.0;
            sep.solve_separable()
        };
        if self.alpha0 == 0.0 {
            return Ok(separable);
        }
        if let Some(sol) = self.solve_active_set(&separable.a, separable.lambda, 200) {
            return Ok(finalize(self, sol));
        }
        let sol = self.solve_projected_gradient(&separable.a, 1e-10, 100_000)?;
        Ok(finalize(self, sol))
    }
}

/// Clamps tiny bound and budget violations left by floating-point arithmetic.
fn finalize(qp: &AllocationQp<'_>, mut sol: QpSolution) -> QpSolution {
    for (a, u) in sol.a.iter_mut().zip(&qp.upper) {
        *a = a.clamp(0.0, *u);
    }
    let used = qp.budget_used(&sol.a);
    if used > qp.budget {
        let s = qp.budget / used;
        sol.a.iter_mut().for_each(|v| *v *= s);
    }
    sol.objective = qp.objective(&sol.a);
    sol.kkt_residual = qp.kkt_residual(&sol.a, sol.lambda);
    sol
}
