use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use bednet_core::dynamics::{simulate_panel, PanelData, ScenarioKind, ScenarioSpec};
use bednet_core::inference::{gibbs_fit, posterior_summary, thin_draws, GibbsConfig, ParameterSummary, PosteriorDraws};
use bednet_core::io::{self, format_number as num, AllocationMeta, PanelPaths, PolicyFile};
use bednet_core::policy::{allocate_with_report, priority_scores, zero_floor_mask, Baseline, PolicyParams};
use bednet_core::rollout::{build_risk_factors, rollout_draws, RolloutEngine};
use bednet_core::search::{column_quantiles, optimize_with_engine, posterior_of_alpha};
use bednet_core::stats::{inv_logit, mean, quantile};
use bednet_core::study::{median_improvement, run_study, ReplicateResult, StudyPolicy};
use bednet_core::Error;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(e) if e.is_data() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rollout fan-out for the single-run commands.
fn init_threads(jobs: usize) {
    // a second call in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn parse_scenario(s: &str) -> Result<ScenarioKind> {
    s.parse().map_err(|e: Error| CliError::Config(e.to_string()))
}

#[derive(Serialize)]
struct TruthFile {
    scenario: ScenarioKind,
    seed: u64,
    parameters: Vec<(String, f64)>,
    quadratic_allocation: f64,
}

pub fn simulate(common: &Common, scenario: &str, replicates: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let kind = parse_scenario(scenario)?;
    if replicates == 0 {
        return Err(CliError::Config("--replicates must be at least 1".into()));
    }
    let spec = ScenarioSpec::standard(kind);
    for r in 0..replicates {
        let dir = if replicates == 1 { common.out.clone() } else { common.out.join(format!("replicate_{:03}", r + 1)) };
        create_dir(&dir)?;
        let seed = cfg.seed.wrapping_add(r as u64);
        let sim = simulate_panel(&spec, seed)?;
        io::write_panel(&PanelPaths::in_dir(&dir), &sim.data)?;
        let names = bednet_core::dynamics::DynamicsParams::column_names(spec.params.n_covariates());
        let truth = TruthFile {
            scenario: kind,
            seed,
            parameters: names.into_iter().zip(spec.params.to_row()).collect(),
            quadratic_allocation: spec.quadratic_allocation,
        };
        io::write_json(&dir.join("truth.json"), &truth)?;
        let g = &sim.data.graph;
        let mut rows = Vec::new();
        for (t, year) in sim.data.years.iter().enumerate() {
            for l in 0..g.n_zones() {
                rows.push(vec![g.zone_ids()[l].clone(), year.to_string(), num(sim.latent[(l, t)])]);
            }
        }
        io::write_table(&dir.join("latent_truth.csv"), &["zone_id", "year", "eta"], &rows)?;
        println!("wrote {} zones x {} years to {}", g.n_zones(), sim.data.years.len(), dir.display());
    }
    Ok(())
}

fn own_lag_summary(draws: &PosteriorDraws) -> Option<ParameterSummary> {
    let mut v: Vec<f64> = draws.parameter("c1")?.into_iter().map(|c| 1.0 + c).collect();
    v.sort_by(f64::total_cmp);
    let (lower, upper) = (quantile(&v, 0.025), quantile(&v, 0.975));
    Some(ParameterSummary {
        name: "own_lag".into(),
        mean: mean(&v),
        lower,
        upper,
        excludes_zero: lower > 0.0 || upper < 0.0,
    })
}

pub fn fit(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    init_threads(common.jobs);
    let data = io::read_panel(&cfg.panel_paths()?)?;
    let draws = gibbs_fit(
        &data,
        &cfg.model.prior,
        GibbsConfig { n_iter: cfg.model.n_iter, burn_in: cfg.model.burn_in, seed: cfg.seed },
    )?;
    create_dir(&common.out)?;
    io::write_posterior(&common.out.join("posterior.csv"), &draws)?;
    io::write_latent(&common.out.join("latent.csv"), &draws, &data.graph, &data.years, 2)?;
    let mut summary = posterior_summary(&draws)?;
    summary.extend(own_lag_summary(&draws));
    io::write_summary(&common.out.join("summary.csv"), &summary)?;
    println!("{:<10} {:>10} {:>10} {:>10}  excludes 0", "parameter", "mean", "2.5%", "97.5%");
    for s in &summary {
        println!("{:<10} {:>10.4} {:>10.4} {:>10.4}  {}", s.name, s.mean, s.lower, s.upper, s.excludes_zero);
    }
    println!("rho acceptance rate {:.3}", draws.acceptance_rate_rho);
    Ok(())
}

fn load_posterior(cfg: &RunConfig, data: &PanelData, posterior: Option<PathBuf>) -> Result<PosteriorDraws> {
    let path = posterior
        .or_else(|| cfg.data.posterior.clone())
        .ok_or_else(|| CliError::Config("no posterior given (data.posterior or --posterior)".into()))?;
    let latent = cfg
        .data
        .latent
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new("")).join("latent.csv"));
    let draws = io::read_posterior(&path, Some(&latent), &data.graph)?;
    match cfg.rollout.posterior_draws {
        Some(k) if k < draws.n_kept() => Ok(thin_draws(&draws, k, cfg.seed)?),
        _ => Ok(draws),
    }
}

pub fn optimize(common: &Common, posterior: Option<PathBuf>, per_draw: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    init_threads(common.jobs);
    let data = io::read_panel(&cfg.panel_paths()?)?;
    let draws = load_posterior(&cfg, &data, posterior)?;
    let space = cfg.search_space();
    let rollout = cfg.rollout_config();
    let starts = rollout_draws(&draws)?;
    let engine = RolloutEngine::new(&data.graph, &data.covariates, &starts, rollout.clone())?;
    let (policy, result) = optimize_with_engine(&engine, cfg.policy.utility_kind, &space, cfg.seed)?;
    create_dir(&common.out)?;
    io::write_json(&common.out.join("policy.json"), &PolicyFile::new(&policy, cfg.policy.budget, &cfg.policy.factors))?;
    io::write_trace(&common.out.join("trace.csv"), &result.trace)?;
    println!("best loss {:.6} at alpha0 {:.4} alpha {:?}", result.best_loss, policy.alpha0, policy.alpha);
    if let Some(k) = per_draw {
        if k == 0 || k > draws.n_kept() {
            return Err(CliError::Config(format!("--per-draw {k} must be between 1 and {} posterior draws", draws.n_kept())));
        }
        let thinned = thin_draws(&draws, k, cfg.seed.wrapping_add(1))?;
        let samples = posterior_of_alpha(&thinned, &data, &rollout, cfg.policy.utility_kind, &space, cfg.seed)?;
        io::write_alpha_samples(&common.out.join("alpha_samples.csv"), &samples)?;
        io::write_alpha_quantiles(&common.out.join("alpha_quantiles.csv"), &column_quantiles(&samples))?;
    }
    Ok(())
}

enum Chosen {
    Utility(PolicyParams, f64),
    Fixed(Baseline),
}

pub fn recommend(common: &Common, policy: Option<String>, year: Option<i64>) -> Result<()> {
    let cfg = load_config(common)?;
    let data = io::read_panel(&cfg.panel_paths()?)?;
    let factors = cfg.policy.factors.clone();
    let chosen = match policy.as_deref() {
        Some(name @ ("highest_rate" | "even")) => Chosen::Fixed(name.parse()?),
        other => {
            let path = other
                .map(PathBuf::from)
                .or_else(|| cfg.data.policy.clone())
                .ok_or_else(|| CliError::Config("no policy given (data.policy or --policy)".into()))?;
            let file: PolicyFile = io::read_json(&path)?;
            if !file.factors.is_empty() && file.factors != factors {
                let show = |f: &[bednet_core::rollout::RiskFactor]| f.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                return Err(CliError::Config(format!(
                    "{} was optimized for factors [{}] but the config lists [{}]",
                    path.display(),
                    show(&file.factors),
                    show(&factors)
                )));
            }
            if file.alpha.len() != factors.len() {
                return Err(CliError::Config(format!(
                    "{} has {} weights but the config lists {} risk factors",
                    path.display(),
                    file.alpha.len(),
                    factors.len()
                )));
            }
            Chosen::Utility(file.policy()?, file.budget)
        }
    };
    let t = match year {
        None => data.years.len() - 1,
        Some(y) => data
            .years
            .iter()
            .position(|&v| v == y)
            .ok_or_else(|| CliError::Config(format!("year {y} is not in the observations")))?,
    };
    let current = data.y(t);
    let previous = data.y(t.saturating_sub(1));
    let rates: Vec<f64> = current.iter().map(|&v| inv_logit(v)).collect();
    let g = &data.graph;
    let (label, coverage, meta) = match chosen {
        Chosen::Fixed(b) => {
            let budget = cfg.policy.budget;
            let a = b.allocate(&rates, g, budget)?;
            let meta = AllocationMeta {
                policy: b.to_string(),
                year: data.years[t],
                budget,
                budget_used: a.budget_share(g.populations()),
                budget_binding: (a.budget_share(g.populations()) - budget).abs() <= 1e-9,
                global_utility: None,
                budget_multiplier: None,
                kkt_residual: None,
                zones_at_zero: a.0.iter().filter(|&&v| v <= 0.0).count(),
                zones_at_one: a.0.iter().filter(|&&v| v >= 1.0).count(),
                neighbor_penalty: a.neighbor_penalty(g),
            };
            (b.to_string(), a.0, meta)
        }
        Chosen::Utility(p, budget) => {
            let rf = build_risk_factors(&factors, g, &data.covariates, &current, &previous)?;
            let scores = priority_scores(&rf, &p.alpha)?;
            let mask = cfg.policy.zero_floor.map(|thr| zero_floor_mask(&rates, thr));
            let report = allocate_with_report(&scores, &p, g, budget, mask.as_deref())?;
            let label = p.utility_kind.to_string();
            let meta = AllocationMeta::from_report(&label, data.years[t], budget, &report, report.allocation.neighbor_penalty(g));
            (label, report.allocation.0, meta)
        }
    };
    create_dir(&common.out)?;
    let csv = common.out.join("allocation.csv");
    io::write_allocation(&csv, g, &coverage)?;
    io::write_json(&io::sidecar(&csv), &meta)?;
    println!(
        "{label}: budget used {:.4} of {:.4}, {} zones at 0, {} at 1",
        meta.budget_used, meta.budget, meta.zones_at_zero, meta.zones_at_one
    );
    Ok(())
}

const LOSS_HEADER: [&str; 10] = [
    "replicate",
    "C",
    "loss_linear",
    "loss_quadratic",
    "loss_highest_rate",
    "loss_even",
    "se_linear",
    "se_quadratic",
    "se_highest_rate",
    "se_even",
];
const IMPROVEMENT_HEADER: [&str; 5] = ["replicate", "policy", "baseline", "C", "improvement"];

fn loss_row(r: &ReplicateResult) -> Vec<String> {
    let mut row = vec![(r.replicate + 1).to_string(), num(r.budget)];
    row.extend(r.losses.iter().map(|l| num(l.mean)));
    row.extend(r.losses.iter().map(|l| num(l.std_error)));
    row
}

fn improvement_rows(r: &ReplicateResult) -> bednet_core::Result<Vec<Vec<String>>> {
    Ok(r.improvements()?
        .into_iter()
        .map(|(p, b, v)| vec![(r.replicate + 1).to_string(), p.name().into(), b.name().into(), num(r.budget), num(v)])
        .collect())
}

fn policy_rows(r: &ReplicateResult) -> Vec<Vec<String>> {
    [&r.linear_policy, &r.quadratic_policy]
        .into_iter()
        .map(|p| {
            let mut row = vec![(r.replicate + 1).to_string(), num(r.budget), p.utility_kind.to_string()];
            row.extend(p.to_point().into_iter().map(num));
            row
        })
        .collect()
}

fn append_rows(path: &Path, rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut f = OpenOptions::new().append(true).open(path)?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StudySummary {
    seed: u64,
    settings: bednet_core::study::StudySettings,
    medians: Vec<MedianRow>,
}

#[derive(Serialize)]
struct MedianRow {
    budget: f64,
    policy: StudyPolicy,
    baseline: StudyPolicy,
    median_improvement: f64,
}

pub fn study(common: &Common, replicates: Option<usize>, scenario: Option<String>) -> Result<()> {
    let cfg = load_config(common)?;
    let mut settings = cfg.study.clone();
    if let Some(r) = replicates {
        settings.replicates = r;
    }
    if let Some(s) = scenario {
        settings.scenario = parse_scenario(&s)?;
    }
    settings.validate().map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(&common.out)?;
    let losses = common.out.join("losses.csv");
    let improvements = common.out.join("improvements.csv");
    // headers now; rows are appended as replicates finish and rewritten in
    // order at the end
    io::write_table(&losses, &LOSS_HEADER, &[])?;
    io::write_table(&improvements, &IMPROVEMENT_HEADER, &[])?;
    let flush_lock = Mutex::new(());
    let results = run_study(&settings, cfg.seed, common.jobs, |res| {
        let _guard = flush_lock.lock().unwrap_or_else(|p| p.into_inner());
        let rows: Vec<Vec<String>> = res.iter().map(loss_row).collect();
        let imp: Vec<Vec<String>> = res.iter().filter_map(|r| improvement_rows(r).ok()).flatten().collect();
        if append_rows(&losses, &rows).and_then(|_| append_rows(&improvements, &imp)).is_err() {
            eprintln!("warning: could not flush partial results");
        }
        if let Some(r) = res.first() {
            eprintln!("replicate {} done", r.replicate + 1);
        }
    })?;
    let imp_rows = results.iter().map(improvement_rows).collect::<bednet_core::Result<Vec<_>>>()?.concat();
    io::write_table(&losses, &LOSS_HEADER, &results.iter().map(loss_row).collect::<Vec<_>>())?;
    io::write_table(&improvements, &IMPROVEMENT_HEADER, &imp_rows)?;
    let q = settings.factors.len();
    let mut header: Vec<String> = ["replicate", "C", "utility_kind", "alpha0"].map(String::from).to_vec();
    header.extend((1..=q).map(|k| format!("alpha{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_table(&common.out.join("policies.csv"), &header, &results.iter().flat_map(policy_rows).collect::<Vec<_>>())?;

    let mut medians = Vec::new();
    for &budget in &settings.budgets {
        for policy in [StudyPolicy::Linear, StudyPolicy::Quadratic] {
            for baseline in [StudyPolicy::HighestRate, StudyPolicy::Even] {
                let m = median_improvement(&results, budget, policy, baseline)?;
                println!("C={budget} {} vs {}: median improvement {:+.4}", policy.name(), baseline.name(), m);
                medians.push(MedianRow { budget, policy, baseline, median_improvement: m });
            }
        }
    }
    io::write_json(&common.out.join("study.json"), &StudySummary { seed: cfg.seed, settings, medians })?;
    Ok(())
}
