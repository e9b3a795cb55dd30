use bednet_core::dynamics::{
    simulate_panel, truncated_unit_normal, CovariateSource, Dynamics, DynamicsParams, Noise, ScenarioKind, ScenarioSpec,
};
use bednet_core::graph::ZoneGraph;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params_with(p: usize) -> DynamicsParams {
    let mut params = DynamicsParams::simulation_truth();
    params.beta1 = (0..p).map(|k| 0.1 * (k as f64 + 1.0)).collect();
    params.beta2 = (0..p).map(|k| -0.05 * (k as f64 + 1.0)).collect();
    params
}

/// Independent dense evaluation of the latent mean.
fn dense_mean(g: &ZoneGraph, params: &DynamicsParams, d0: f64, eta: &[f64], a: &[f64], x: &DMatrix<f64>) -> Vec<f64> {
    let n = g.n_zones();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        w[(i, i)] = 1.0 + params.c1 + params.b1 * a[i];
        let m = g.degree(i) as f64;
        for &j in g.neighbors(i) {
            w[(i, j)] = (params.c2 + params.b2 * a[i]) / m;
        }
    }
    let lag = w * DVector::from_column_slice(eta);
    (0..n)
        .map(|i| {
            let mut v = lag[i] + params.c0 + params.b0 * a[i] + d0 * a[i] * a[i];
            for k in 0..x.ncols() {
                v += params.beta1[k] * x[(i, k)] + params.beta2[k] * x[(i, k)] * a[i];
            }
            v
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mean_step_matches_dense_oracle(
        rows in 1usize..5, cols in 2usize..5, p in 0usize..3, seed in any::<u64>(), d0 in -0.5f64..0.5,
    ) {
        use rand::Rng;
        let g = ZoneGraph::grid(rows, cols).unwrap();
        let n = g.n_zones();
        let params = params_with(p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-2.0..2.0));
        let dyn_ = Dynamics::new(&g, params.clone()).unwrap().with_quadratic_allocation(d0);
        let got = dyn_.mean_step(&eta, &a, &x).unwrap();
        let want = dense_mean(&g, &params, d0, &eta, &a, &x);
        for (u, v) in got.iter().zip(&want) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn lag_part_is_linear(seed in any::<u64>(), s in -2.0f64..2.0, t in -2.0f64..2.0) {
        use rand::Rng;
        let g = ZoneGraph::grid(4, 4).unwrap();
        let n = g.n_zones();
        let params = params_with(1);
        let dyn_ = Dynamics::new(&g, params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let offset = dyn_.step(&vec![0.0; n], &a, &x, Noise::Zero).unwrap();
        let lin = |e: &[f64]| -> Vec<f64> {
            dyn_.step(e, &a, &x, Noise::Zero).unwrap().iter().zip(&offset).map(|(y, o)| y - o).collect()
        };
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| s * a + t * b).collect();
        let (lu, lv, lm) = (lin(&u), lin(&v), lin(&mix));
        for i in 0..n {
            prop_assert!((lm[i] - (s * lu[i] + t * lv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn allocation_has_no_effect_in_the_null_model(seed in any::<u64>()) {
        use rand::Rng;
        let g = ZoneGraph::grid(3, 4).unwrap();
        let n = g.n_zones();
        let mut params = params_with(2);
        params.b0 = 0.0;
        params.b1 = 0.0;
        params.b2 = 0.0;
        params.beta2 = vec![0.0; 2];
        let dyn_ = Dynamics::new(&g, params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let a1: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let a2: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let y1 = dyn_.step(&eta, &a1, &x, Noise::Given(&noise)).unwrap();
        let y2 = dyn_.step(&eta, &a2, &x, Noise::Given(&noise)).unwrap();
        prop_assert_eq!(y1, y2);
    }
}

#[test]
fn truncated_allocations_stay_in_the_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut outside = 0usize;
    for i in 0..1_000_000u32 {
        let mean = 0.1 * (i % 6) as f64;
        let v = truncated_unit_normal(&mut rng, mean, 0.05);
        if !(0.0..=1.0).contains(&v) {
            outside += 1;
        }
    }
    assert_eq!(outside, 0);
}

#[test]
fn simulated_allocations_stay_in_the_unit_interval_with_wide_spread() {
    let mut spec = ScenarioSpec::standard(ScenarioKind::CorrectSpec);
    spec.allocation_sd = 0.5;
    for seed in 0..20 {
        let sim = simulate_panel(&spec, seed).unwrap();
        assert!(sim.data.allocations.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn misspecified_generator_adds_the_squared_allocation_term() {
    let correct = ScenarioSpec::standard(ScenarioKind::CorrectSpec);
    let mis = ScenarioSpec::standard(ScenarioKind::QuadraticMisspec);
    assert_eq!(mis.quadratic_allocation, 0.2);
    assert_eq!(mis.params.b0, -0.8);
    assert_eq!(correct.quadratic_allocation, 0.0);
    let n = mis.graph.n_zones();
    let x = DMatrix::zeros(n, 1);
    let eta = vec![0.0; n];
    let a = vec![0.5; n];
    let m = mis.dynamics().unwrap().mean_step(&eta, &a, &x).unwrap();
    // c0 + b0·a + d0·a² = 0.2 − 0.4 + 0.05
    assert!(m.iter().all(|v| (v - (-0.15)).abs() < 1e-12));
    let simulated = simulate_panel(&mis, 3).unwrap();
    assert_eq!(simulated.data.logit_prevalence.shape(), (100, 6));
}

#[test]
fn simulated_panel_is_consistent_with_its_latent_trajectory() {
    let mut spec = ScenarioSpec::standard(ScenarioKind::CorrectSpec);
    spec.covariates = CovariateSource::Given(DMatrix::from_fn(100, 1, |i, _| (i as f64 / 50.0) - 1.0));
    let sim = simulate_panel(&spec, 11).unwrap();
    let dyn_ = spec.dynamics().unwrap();
    let x = &sim.data.covariates;
    // residuals η_t − mean(η_{t−1}) are CAR innovations: their quadratic
    // form under the innovation precision averages n per year
    let mut total = 0.0;
    for t in 1..=5 {
        let prev: Vec<f64> = sim.latent.column(t - 1).iter().copied().collect();
        let mean = dyn_.mean_step(&prev, &sim.data.a(t), x).unwrap();
        let resid: Vec<f64> = sim.latent.column(t).iter().zip(&mean).map(|(e, m)| e - m).collect();
        total += dyn_.innovation().precision().quad_form(&resid);
    }
    let per_year = total / 5.0;
    // chi-square(100) per year, 5 years: sd of the average is sqrt(200/5)
    assert!((per_year - 100.0).abs() < 4.0 * (200.0f64 / 5.0).sqrt(), "{per_year}");
    // observations stay close to the latent field
    let max_gap = (&sim.data.logit_prevalence - &sim.latent).abs().max();
    assert!(max_gap < 0.1, "{max_gap}");
}
