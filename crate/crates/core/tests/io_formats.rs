use bednet_core::dynamics::{simulate_panel, ScenarioKind, ScenarioSpec};
use bednet_core::inference::{gibbs_fit, GibbsConfig, PriorSpec};
use bednet_core::io::*;
use bednet_core::policy::{PolicyParams, UtilityKind};
use bednet_core::rollout::RiskFactor;
use bednet_core::search::TraceRow;
use bednet_core::Error;
use bednet_core::graph::ZoneGraph;
use nalgebra::DMatrix;

// files carry no coordinates, so compare everything else
fn same_graph(a: &ZoneGraph, b: &ZoneGraph) -> bool {
    a.zone_ids() == b.zone_ids() && a.populations() == b.populations() && a.edges().collect::<Vec<_>>() == b.edges().collect::<Vec<_>>()
}

#[test]
fn panel_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_panel(&ScenarioSpec::standard(ScenarioKind::CorrectSpec), 4).unwrap();
    let paths = PanelPaths::in_dir(dir.path());
    write_panel(&paths, &sim.data).unwrap();
    let back = read_panel(&paths).unwrap();
    assert!(same_graph(&back.graph, &sim.data.graph));
    assert_eq!(back.covariates, sim.data.covariates);
    assert_eq!(back.allocations, sim.data.allocations);
    assert_eq!(back.years, sim.data.years);
    // prevalence is stored on the probability scale
    assert!((&back.logit_prevalence - &sim.data.logit_prevalence).abs().max() < 1e-12);
    let text = std::fs::read_to_string(&paths.observations).unwrap();
    assert_eq!(text.lines().count(), 601);
}

#[test]
fn shuffled_rows_load_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_panel(&ScenarioSpec::standard(ScenarioKind::CorrectSpec), 4).unwrap();
    let paths = PanelPaths::in_dir(dir.path());
    write_panel(&paths, &sim.data).unwrap();
    let text = std::fs::read_to_string(&paths.observations).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    std::fs::write(&paths.observations, format!("{header}\n{}\n", lines.join("\n"))).unwrap();
    let adj = std::fs::read_to_string(&paths.adjacency).unwrap();
    // edges are order-insensitive
    let swapped: Vec<String> = adj.lines().skip(1).map(|l| l.split(',').rev().collect::<Vec<_>>().join(",")).collect();
    std::fs::write(&paths.adjacency, format!("zone_a,zone_b\n{}\n", swapped.join("\n"))).unwrap();
    let back = read_panel(&paths).unwrap();
    assert!(same_graph(&back.graph, &sim.data.graph));
    assert_eq!(back.allocations, sim.data.allocations);
}

#[test]
fn malformed_inputs_name_the_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_panel(&ScenarioSpec::standard(ScenarioKind::CorrectSpec), 4).unwrap();
    let paths = PanelPaths::in_dir(dir.path());
    write_panel(&paths, &sim.data).unwrap();
    let text = std::fs::read_to_string(&paths.observations).unwrap();

    let bad = text.replacen("z000,1,0.", "z000,1,1.", 1);
    std::fs::write(&paths.observations, bad).unwrap();
    let e = read_panel(&paths).unwrap_err();
    assert!(matches!(e, Error::Data { .. }));
    assert!(e.to_string().contains("observations.csv") && e.to_string().contains("line 3"), "{e}");

    let missing_cov: String = text.lines().map(|l| if l.starts_with("z005,3,") { l.rsplit_once(',').unwrap().0.to_string() + "," } else { l.to_string() }).collect::<Vec<_>>().join("\n");
    std::fs::write(&paths.observations, missing_cov).unwrap();
    assert!(read_panel(&paths).unwrap_err().to_string().contains("coverage"));

    std::fs::remove_file(&paths.zones).unwrap();
    let e = read_panel(&paths).unwrap_err();
    assert!(matches!(e, Error::Io { .. }) && e.to_string().contains("zones.csv"));
}

#[test]
fn posterior_and_latent_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_panel(&ScenarioSpec::standard(ScenarioKind::CorrectSpec), 4).unwrap();
    let fit = gibbs_fit(&sim.data, &PriorSpec::default(), GibbsConfig { n_iter: 30, burn_in: 10, seed: 3 }).unwrap();
    let post = dir.path().join("posterior.csv");
    let latent = dir.path().join("latent.csv");
    write_posterior(&post, &fit).unwrap();
    write_latent(&latent, &fit, &sim.data.graph, &sim.data.years, 2).unwrap();
    let back = read_posterior(&post, Some(&latent), &sim.data.graph).unwrap();
    assert_eq!(back.n_kept(), 20);
    assert_eq!((back.seed, back.n_iter, back.burn_in), (3, 30, 10));
    assert_eq!(back.acceptance_rate_rho, fit.acceptance_rate_rho);
    for (a, b) in back.draws.iter().zip(&fit.draws) {
        assert_eq!(a.params, b.params);
        let t = b.latent.ncols();
        assert_eq!(a.latent, b.latent.columns(t - 2, 2).into_owned());
    }
    let meta: PosteriorMeta = read_json(&sidecar(&post)).unwrap();
    assert_eq!(meta.columns.len(), 11);
}

#[test]
fn policy_trace_and_allocation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let policy = PolicyParams::new(0.25, vec![1.5, -0.5], UtilityKind::Quadratic).unwrap();
    let file = PolicyFile::new(&policy, 0.4, &[RiskFactor::CurrentRate, RiskFactor::Covariate(0)]);
    let p = dir.path().join("policy.json");
    write_json(&p, &file).unwrap();
    let back: PolicyFile = read_json(&p).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.policy().unwrap(), policy);
    // flat document without factors is accepted, unknown keys are not
    std::fs::write(&p, r#"{"alpha0": 0.1, "alpha": [1.0], "utility_kind": "linear", "budget": 0.5}"#).unwrap();
    assert!(read_json::<PolicyFile>(&p).unwrap().factors.is_empty());
    std::fs::write(&p, r#"{"alpha0": 0.1, "alpha": [1.0], "utility_kind": "linear", "budget": 0.5, "x": 1}"#).unwrap();
    assert!(read_json::<PolicyFile>(&p).is_err());

    let trace = vec![
        TraceRow { iter: 0, point: vec![0.1, 1.0 / 3.0, -2.0], loss: 0.123456789, loss_se: 0.001, is_initial: true },
        TraceRow { iter: 1, point: vec![0.0, 5.0, -5.0], loss: 0.1, loss_se: 0.0, is_initial: false },
    ];
    let t = dir.path().join("trace.csv");
    write_trace(&t, &trace).unwrap();
    assert_eq!(read_trace(&t).unwrap(), trace);
    assert!(std::fs::read_to_string(&t).unwrap().starts_with("iter,alpha0,alpha1,alpha2,loss,loss_se,is_initial\n"));

    let g = bednet_core::graph::ZoneGraph::grid(2, 3).unwrap();
    let cov = vec![0.0, 1.0, 0.25, 1.0 / 7.0, 0.5, 0.999];
    let a = dir.path().join("allocation.csv");
    write_allocation(&a, &g, &cov).unwrap();
    assert_eq!(read_allocation(&a, &g).unwrap(), cov);
}

#[test]
fn alpha_tables_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let samples = DMatrix::from_fn(100, 4, |i, j| (i * 4 + j) as f64 / 10.0);
    let s = dir.path().join("alpha_samples.csv");
    write_alpha_samples(&s, &samples).unwrap();
    let text = std::fs::read_to_string(&s).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert!(text.starts_with("draw,alpha0,alpha1,alpha2,alpha3\n"));
    let q = dir.path().join("alpha_quantiles.csv");
    write_alpha_quantiles(&q, &bednet_core::search::column_quantiles(&samples)).unwrap();
    assert_eq!(std::fs::read_to_string(&q).unwrap().lines().count(), 5);
}
