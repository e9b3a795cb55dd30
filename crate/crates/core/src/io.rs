//! CSV and JSON file formats.
//!
//! * `zones.csv`: `zone_id,population,x1..xp`
//! * `adjacency.csv`: `zone_a,zone_b`, one row per undirected edge
//! * `observations.csv`: `zone_id,year,prevalence,coverage`; coverage is the
//!   allocation that acted during the transition into `year` and is empty
//!   for the first year
//! * posterior draws: one row per draw, one column per scalar parameter,
//!   with a JSON sidecar of run metadata
//! * latent draws: `draw,zone_id,year,eta`

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsParams, PanelData};
use crate::error::{Error, Result};
use crate::graph::ZoneGraph;
use crate::inference::{ParameterSummary, PosteriorDraw, PosteriorDraws};
use crate::policy::{AllocationReport, PolicyParams, UtilityKind};
use crate::rollout::RiskFactor;
use crate::search::TraceRow;
use crate::stats::{inv_logit, logit};

/// Paths of the three files describing a panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelPaths {
    pub zones: PathBuf,
    pub adjacency: PathBuf,
    pub observations: PathBuf,
}

impl PanelPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { zones: dir.join("zones.csv"), adjacency: dir.join("adjacency.csv"), observations: dir.join("observations.csv") }
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(path, format!("{other:?}")),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Shortest round-trip representation.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn parse_num(path: &Path, line: u64, field: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::data(path, format!("line {line}: {field} {s:?} is not a finite number")))
}

fn headers(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<String>> {
    Ok(rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect())
}

fn expect_headers(path: &Path, got: &[String], want: &[&str]) -> Result<()> {
    if got.len() < want.len() || got.iter().zip(want).any(|(g, w)| g != w) {
        return Err(Error::data(path, format!("expected header starting with {}, found {}", want.join(","), got.join(","))));
    }
    Ok(())
}

fn write_csv(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(path, e.to_string()))?;
    f.write_all(text.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
}

/// Sidecar path next to a CSV: `name.csv` → `name.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_panel(paths: &PanelPaths, data: &PanelData) -> Result<()> {
    let g = &data.graph;
    let p = data.n_covariates();
    let mut header = vec!["zone_id".to_string(), "population".to_string()];
    header.extend((1..=p).map(|k| format!("x{k}")));
    let zones = (0..g.n_zones()).map(|l| {
        let mut row = vec![g.zone_ids()[l].clone(), num(g.populations()[l])];
        row.extend((0..p).map(|k| num(data.covariates[(l, k)])));
        row
    });
    write_csv(&paths.zones, std::iter::once(header).chain(zones))?;

    let adjacency = g.edges().map(|(i, j)| vec![g.zone_ids()[i].clone(), g.zone_ids()[j].clone()]);
    write_csv(&paths.adjacency, std::iter::once(vec!["zone_a".into(), "zone_b".into()]).chain(adjacency))?;

    let mut rows = vec![vec!["zone_id".to_string(), "year".into(), "prevalence".into(), "coverage".into()]];
    for l in 0..g.n_zones() {
        for (t, year) in data.years.iter().enumerate() {
            let coverage = if t == 0 { String::new() } else { num(data.allocations[(l, t - 1)]) };
            rows.push(vec![
                g.zone_ids()[l].clone(),
                year.to_string(),
                num(inv_logit(data.logit_prevalence[(l, t)])),
                coverage,
            ]);
        }
    }
    write_csv(&paths.observations, rows)
}

/// Reads zones and adjacency into a graph plus the covariate matrix.
pub fn read_zones(zones: &Path, adjacency: &Path) -> Result<(ZoneGraph, DMatrix<f64>)> {
    let mut rdr = reader(zones)?;
    let header = headers(zones, &mut rdr)?;
    expect_headers(zones, &header, &["zone_id", "population"])?;
    let p = header.len() - 2;
    let mut labels = Vec::new();
    let mut covariates: Vec<f64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(zones, e))?;
        if rec.len() != header.len() {
            return Err(Error::data(zones, format!("line {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        labels.push((rec[0].to_string(), parse_num(zones, line, "population", &rec[1])?));
        for k in 0..p {
            covariates.push(parse_num(zones, line, &header[k + 2], &rec[k + 2])?);
        }
    }
    let mut rdr = reader(adjacency)?;
    let header = headers(adjacency, &mut rdr)?;
    expect_headers(adjacency, &header, &["zone_a", "zone_b"])?;
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(adjacency, e))?;
        edges.push((rec[0].to_string(), rec[1].to_string()));
    }
    let graph = ZoneGraph::from_labels(&labels, &edges).map_err(|e| Error::data(adjacency, e.to_string()))?;
    let n = labels.len();
    Ok((graph, DMatrix::from_row_slice(n, p, &covariates)))
}

pub fn read_panel(paths: &PanelPaths) -> Result<PanelData> {
    let (graph, covariates) = read_zones(&paths.zones, &paths.adjacency)?;
    let path = &paths.observations;
    let index: HashMap<&str, usize> = graph.zone_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    expect_headers(path, &header, &["zone_id", "year", "prevalence", "coverage"])?;
    let mut cells: BTreeMap<i64, Vec<Option<(f64, Option<f64>)>>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let zone = *index
            .get(&rec[0])
            .ok_or_else(|| Error::data(path, format!("line {line}: unknown zone {:?}", &rec[0])))?;
        let year: i64 = rec[1].parse().map_err(|_| Error::data(path, format!("line {line}: bad year {:?}", &rec[1])))?;
        let prevalence = parse_num(path, line, "prevalence", &rec[2])?;
        if !(prevalence > 0.0 && prevalence < 1.0) {
            return Err(Error::data(path, format!("line {line}: prevalence {prevalence} is outside (0, 1)")));
        }
        let coverage = match rec.get(3).unwrap_or("") {
            "" => None,
            s => Some(parse_num(path, line, "coverage", s)?),
        };
        let slot = &mut cells.entry(year).or_insert_with(|| vec![None; graph.n_zones()])[zone];
        if slot.is_some() {
            return Err(Error::data(path, format!("line {line}: duplicate row for zone {} year {year}", &rec[0])));
        }
        *slot = Some((logit(prevalence), coverage));
    }
    if cells.is_empty() {
        return Err(Error::data(path, "no observations"));
    }
    let years: Vec<i64> = cells.keys().copied().collect();
    let n = graph.n_zones();
    let mut y = DMatrix::zeros(n, years.len());
    let mut a = DMatrix::zeros(n, years.len() - 1);
    for (t, year) in years.iter().enumerate() {
        for (l, cell) in cells[year].iter().enumerate() {
            let (eta, cov) = cell.ok_or_else(|| Error::data(path, format!("zone {} has no row for year {year}", graph.zone_ids()[l])))?;
            y[(l, t)] = eta;
            if t > 0 {
                a[(l, t - 1)] = cov.ok_or_else(|| {
                    Error::data(path, format!("zone {} year {year}: coverage is required after the first year", graph.zone_ids()[l]))
                })?;
            }
        }
    }
    PanelData::new(graph, covariates, y, a, years).map_err(|e| Error::data(path, e.to_string()))
}

/// Run metadata stored next to the posterior CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMeta {
    pub seed: u64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub n_kept: usize,
    pub acceptance_rate_rho: f64,
    pub rho_step: f64,
    pub columns: Vec<String>,
}

pub fn write_posterior(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let columns = DynamicsParams::column_names(draws.n_covariates());
    let rows = draws.draws.iter().map(|d| d.params.to_row().into_iter().map(num).collect());
    write_csv(path, std::iter::once(columns.clone()).chain(rows))?;
    let meta = PosteriorMeta {
        seed: draws.seed,
        n_iter: draws.n_iter,
        burn_in: draws.burn_in,
        n_kept: draws.n_kept(),
        acceptance_rate_rho: draws.acceptance_rate_rho,
        rho_step: draws.rho_step,
        columns,
    };
    write_json(&sidecar(path), &meta)
}

/// Writes the last `years` latent columns of every draw.
pub fn write_latent(path: &Path, draws: &PosteriorDraws, graph: &ZoneGraph, year_labels: &[i64], years: usize) -> Result<()> {
    let mut rows = vec![vec!["draw".to_string(), "zone_id".into(), "year".into(), "eta".into()]];
    for (k, d) in draws.draws.iter().enumerate() {
        let cols = d.latent.ncols();
        let keep = years.min(cols);
        for c in cols - keep..cols {
            let label = year_labels[year_labels.len() - cols + c];
            for l in 0..graph.n_zones() {
                rows.push(vec![k.to_string(), graph.zone_ids()[l].clone(), label.to_string(), num(d.latent[(l, c)])]);
            }
        }
    }
    write_csv(path, rows)
}

/// Reads posterior draws; latent fields come from `latent` when given and
/// are empty otherwise.
pub fn read_posterior(path: &Path, latent: Option<&Path>, graph: &ZoneGraph) -> Result<PosteriorDraws> {
    let meta: PosteriorMeta = read_json(&sidecar(path))?;
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    let p = header.len().saturating_sub(9) / 2;
    if header != DynamicsParams::column_names(p) {
        return Err(Error::data(path, format!("unexpected posterior columns {}", header.join(","))));
    }
    let mut draws = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec.iter().zip(&header).map(|(s, h)| parse_num(path, line, h, s)).collect::<Result<Vec<_>>>()?;
        let params = DynamicsParams::from_row(&row).map_err(|e| Error::data(path, format!("line {line}: {e}")))?;
        draws.push(PosteriorDraw { params, latent: DMatrix::zeros(graph.n_zones(), 0) });
    }
    if let Some(lpath) = latent {
        let index: HashMap<&str, usize> = graph.zone_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut rdr = reader(lpath)?;
        let header = headers(lpath, &mut rdr)?;
        expect_headers(lpath, &header, &["draw", "zone_id", "year", "eta"])?;
        let mut cells: Vec<BTreeMap<i64, Vec<f64>>> = vec![BTreeMap::new(); draws.len()];
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| csv_err(lpath, e))?;
            let k: usize = rec[0]
                .parse()
                .ok()
                .filter(|&k| k < draws.len())
                .ok_or_else(|| Error::data(lpath, format!("line {line}: bad draw index {:?}", &rec[0])))?;
            let zone = *index.get(&rec[1]).ok_or_else(|| Error::data(lpath, format!("line {line}: unknown zone {:?}", &rec[1])))?;
            let year: i64 = rec[2].parse().map_err(|_| Error::data(lpath, format!("line {line}: bad year {:?}", &rec[2])))?;
            let eta = parse_num(lpath, line, "eta", &rec[3])?;
            cells[k].entry(year).or_insert_with(|| vec![f64::NAN; graph.n_zones()])[zone] = eta;
        }
        for (k, by_year) in cells.into_iter().enumerate() {
            let cols: Vec<Vec<f64>> = by_year.into_values().collect();
            if cols.iter().flatten().any(|v| v.is_nan()) {
                return Err(Error::data(lpath, format!("draw {k} is missing latent values for some zones")));
            }
            draws[k].latent = DMatrix::from_fn(graph.n_zones(), cols.len(), |l, c| cols[c][l]);
        }
    }
    if draws.len() != meta.n_kept {
        return Err(Error::data(path, format!("{} draws but the sidecar records {}", draws.len(), meta.n_kept)));
    }
    Ok(PosteriorDraws {
        draws,
        n_iter: meta.n_iter,
        burn_in: meta.burn_in,
        seed: meta.seed,
        acceptance_rate_rho: meta.acceptance_rate_rho,
        rho_step: meta.rho_step,
        log_posterior: Vec::new(),
    })
}

pub fn write_summary(path: &Path, summary: &[ParameterSummary]) -> Result<()> {
    let header = ["parameter", "mean", "lower_95", "upper_95", "excludes_zero"].map(String::from).to_vec();
    let rows = summary
        .iter()
        .map(|s| vec![s.name.clone(), num(s.mean), num(s.lower), num(s.upper), s.excludes_zero.to_string()]);
    write_csv(path, std::iter::once(header).chain(rows))
}

/// Flat policy document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    pub utility_kind: UtilityKind,
    pub budget: f64,
    /// Risk factors the weights apply to, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<RiskFactor>,
}

impl PolicyFile {
    pub fn new(policy: &PolicyParams, budget: f64, factors: &[RiskFactor]) -> Self {
        Self {
            alpha0: policy.alpha0,
            alpha: policy.alpha.clone(),
            utility_kind: policy.utility_kind,
            budget,
            factors: factors.to_vec(),
        }
    }

    pub fn policy(&self) -> Result<PolicyParams> {
        PolicyParams::new(self.alpha0, self.alpha.clone(), self.utility_kind)
    }
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let q = trace.first().map_or(0, |r| r.point.len().saturating_sub(1));
    let mut header = vec!["iter".to_string(), "alpha0".into()];
    header.extend((1..=q).map(|k| format!("alpha{k}")));
    header.extend(["loss", "loss_se", "is_initial"].map(String::from));
    let rows = trace.iter().map(|r| {
        let mut row = vec![r.iter.to_string()];
        row.extend(r.point.iter().map(|&v| num(v)));
        row.extend([num(r.loss), num(r.loss_se), r.is_initial.to_string()]);
        row
    });
    write_csv(path, std::iter::once(header).chain(rows))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    expect_headers(path, &header, &["iter", "alpha0"])?;
    let d = header.len() - 4;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let iter = rec[0].parse().map_err(|_| Error::data(path, format!("line {line}: bad iter")))?;
        let point = (1..=d).map(|k| parse_num(path, line, &header[k], &rec[k])).collect::<Result<Vec<_>>>()?;
        out.push(TraceRow {
            iter,
            point,
            loss: parse_num(path, line, "loss", &rec[d + 1])?,
            loss_se: parse_num(path, line, "loss_se", &rec[d + 2])?,
            is_initial: rec[d + 3].parse().map_err(|_| Error::data(path, format!("line {line}: bad is_initial")))?,
        });
    }
    Ok(out)
}

/// Achieved utility and binding-constraint report for an allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationMeta {
    pub policy: String,
    pub year: i64,
    pub budget: f64,
    pub budget_used: f64,
    pub budget_binding: bool,
    pub global_utility: Option<f64>,
    pub budget_multiplier: Option<f64>,
    pub kkt_residual: Option<f64>,
    pub zones_at_zero: usize,
    pub zones_at_one: usize,
    pub neighbor_penalty: f64,
}

impl AllocationMeta {
    pub fn from_report(policy: &str, year: i64, budget: f64, report: &AllocationReport, neighbor_penalty: f64) -> Self {
        Self {
            policy: policy.to_string(),
            year,
            budget,
            budget_used: report.budget_used,
            budget_binding: report.budget_binding(budget),
            global_utility: Some(report.global_utility),
            budget_multiplier: Some(report.budget_multiplier),
            kkt_residual: Some(report.kkt_residual),
            zones_at_zero: report.zones_at_zero,
            zones_at_one: report.zones_at_one,
            neighbor_penalty,
        }
    }
}

pub fn write_allocation(path: &Path, graph: &ZoneGraph, coverage: &[f64]) -> Result<()> {
    let rows = (0..graph.n_zones()).map(|l| vec![graph.zone_ids()[l].clone(), num(coverage[l])]);
    write_csv(path, std::iter::once(vec!["zone_id".to_string(), "coverage".into()]).chain(rows))
}

pub fn read_allocation(path: &Path, graph: &ZoneGraph) -> Result<Vec<f64>> {
    let index: HashMap<&str, usize> = graph.zone_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut rdr = reader(path)?;
    let header = headers(path, &mut rdr)?;
    expect_headers(path, &header, &["zone_id", "coverage"])?;
    let mut out = vec![f64::NAN; graph.n_zones()];
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let zone = *index.get(&rec[0]).ok_or_else(|| Error::data(path, format!("line {line}: unknown zone {:?}", &rec[0])))?;
        out[zone] = parse_num(path, line, "coverage", &rec[1])?;
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::data(path, "some zones have no coverage row"));
    }
    Ok(out)
}

/// One optimized-weight row per posterior draw.
pub fn write_alpha_samples(path: &Path, samples: &DMatrix<f64>) -> Result<()> {
    let mut header = vec!["draw".to_string(), "alpha0".into()];
    header.extend((1..samples.ncols()).map(|k| format!("alpha{k}")));
    let rows = samples.row_iter().enumerate().map(|(i, r)| {
        let mut row = vec![i.to_string()];
        row.extend(r.iter().map(|&v| num(v)));
        row
    });
    write_csv(path, std::iter::once(header).chain(rows))
}

pub fn write_alpha_quantiles(path: &Path, quantiles: &[[f64; 5]]) -> Result<()> {
    let header = ["coordinate", "q05", "q25", "q50", "q75", "q95"].map(String::from).to_vec();
    let rows = quantiles.iter().enumerate().map(|(j, q)| {
        let mut row = vec![if j == 0 { "alpha0".to_string() } else { format!("alpha{j}") }];
        row.extend(q.iter().map(|&v| num(v)));
        row
    });
    write_csv(path, std::iter::once(header).chain(rows))
}

/// Writes a table of already-formatted rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_csv(path, std::iter::once(header.iter().map(|s| s.to_string()).collect()).chain(rows.iter().cloned()))
}

pub fn format_number(v: f64) -> String {
    num(v)
}
