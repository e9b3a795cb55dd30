//! Zone adjacency graphs and the CAR precision `σ⁻²(M − ρG)` built on them.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sparse::{SparseCholesky, SparseSym};

/// Health-zone graph: labels, populations and symmetric adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneGraph {
    zone_ids: Vec<String>,
    populations: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
    coords: Option<Vec<[f64; 2]>>,
}

impl ZoneGraph {
    /// Builds a graph from labels, populations and undirected edges given by index.
    ///
    /// Edges are symmetrized and deduplicated. Self-loops, non-positive
    /// populations and isolated zones are rejected.
    pub fn new(zone_ids: Vec<String>, populations: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = zone_ids.len();
        if populations.len() != n {
            return Err(Error::Dimension { context: "zone populations", expected: n, got: populations.len() });
        }
        if n < 2 {
            return Err(Error::Graph(format!("a zone graph needs at least 2 zones, got {n}")));
        }
        let mut seen = HashMap::with_capacity(n);
        for (i, id) in zone_ids.iter().enumerate() {
            if seen.insert(id.as_str(), i).is_some() {
                return Err(Error::Graph(format!("duplicate zone id {id:?}")));
            }
        }
        for (id, &pop) in zone_ids.iter().zip(&populations) {
            if !(pop > 0.0) || !pop.is_finite() {
                return Err(Error::Graph(format!("zone {id:?} has non-positive population {pop}")));
            }
        }
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) references a zone index >= {n}")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on zone {:?}", zone_ids[a])));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        if let Some(l) = sets.iter().position(BTreeSet::is_empty) {
            return Err(Error::Graph(format!("zone {:?} is isolated", zone_ids[l])));
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self { zone_ids, populations, neighbors, coords: None })
    }

    /// Rook-adjacency lattice with unit spacing and unit populations.
    ///
    /// Zones are numbered row-major; zone `r * cols + c` sits at `(c, r)`.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols < 2 {
            return Err(Error::Graph(format!("a {rows}x{cols} grid has fewer than 2 zones")));
        }
        let idx = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::with_capacity(2 * rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.push((idx(r, c), idx(r, c + 1)));
                }
                if r + 1 < rows {
                    edges.push((idx(r, c), idx(r + 1, c)));
                }
            }
        }
        let n = rows * cols;
        let ids = (0..n).map(|i| format!("z{i:03}")).collect();
        let mut g = Self::new(ids, vec![1.0; n], &edges)?;
        g.coords = Some((0..n).map(|i| [(i % cols) as f64, (i / cols) as f64]).collect());
        Ok(g)
    }

    /// Builds a graph from a labelled zone table and a labelled edge list.
    pub fn from_labels(zones: &[(String, f64)], edges: &[(String, String)]) -> Result<Self> {
        let index: HashMap<&str, usize> = zones.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::Graph(format!("edge references unknown zone id {id:?}")))
        };
        let idx_edges = edges
            .iter()
            .map(|(a, b)| Ok((lookup(a)?, lookup(b)?)))
            .collect::<Result<Vec<_>>>()?;
        let ids = zones.iter().map(|(id, _)| id.clone()).collect();
        let pops = zones.iter().map(|&(_, p)| p).collect();
        Self::new(ids, pops, &idx_edges)
    }

    pub fn with_coords(mut self, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != self.n_zones() {
            return Err(Error::Dimension { context: "zone coordinates", expected: self.n_zones(), got: coords.len() });
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn with_populations(mut self, populations: Vec<f64>) -> Result<Self> {
        let g = Self::new(self.zone_ids.clone(), populations, &self.edges().collect::<Vec<_>>())?;
        self.populations = g.populations;
        Ok(self)
    }

    pub fn n_zones(&self) -> usize {
        self.zone_ids.len()
    }

    pub fn zone_ids(&self) -> &[String] {
        &self.zone_ids
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    pub fn neighbors(&self, l: usize) -> &[usize] {
        &self.neighbors[l]
    }

    pub fn degree(&self, l: usize) -> usize {
        self.neighbors[l].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    /// Undirected edges `(i, j)` with `i < j`, each listed once.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Neighbour average `(1/m_l) Σ_{j∈I_l} x_j` for every zone.
    pub fn neighbor_mean(&self, x: &[f64]) -> Vec<f64> {
        self.neighbors
            .iter()
            .map(|nb| nb.iter().map(|&j| x[j]).sum::<f64>() / nb.len() as f64)
            .collect()
    }

    /// `M − ρG` without the variance scaling.
    pub fn car_structure(&self, rho: f64) -> SparseSym {
        let diag = self.neighbors.iter().map(|nb| nb.len() as f64).collect();
        SparseSym::from_entries(diag, self.edges().map(|(i, j)| (i, j, -rho)))
    }

    /// Graph Laplacian `M − G`.
    pub fn laplacian(&self) -> SparseSym {
        self.car_structure(1.0)
    }

    /// Relabels zones so that new zone `k` is old zone `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_zones();
        if perm.len() != n {
            return Err(Error::Dimension { context: "zone permutation", expected: n, got: perm.len() });
        }
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        if inv.contains(&usize::MAX) {
            return Err(Error::Invalid("zone permutation is not a bijection".into()));
        }
        let ids = perm.iter().map(|&o| self.zone_ids[o].clone()).collect();
        let pops = perm.iter().map(|&o| self.populations[o]).collect();
        let edges: Vec<_> = self.edges().map(|(i, j)| (inv[i], inv[j])).collect();
        let mut g = Self::new(ids, pops, &edges)?;
        g.coords = self.coords.as_ref().map(|c| perm.iter().map(|&o| c[o]).collect());
        Ok(g)
    }
}

/// CAR precision `σ_s⁻²(M − ρG)` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CarPrecision {
    rho: f64,
    sigma_s2: f64,
    precision: SparseSym,
    factor: SparseCholesky,
}

impl CarPrecision {
    pub fn new(graph: &ZoneGraph, rho: f64, sigma_s2: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Domain { name: "rho", value: rho, domain: "(0, 1)" });
        }
        if !(sigma_s2 > 0.0) || !sigma_s2.is_finite() {
            return Err(Error::Domain { name: "sigma_s2", value: sigma_s2, domain: "(0, inf)" });
        }
        let structure = graph.car_structure(rho);
        let inv_var = 1.0 / sigma_s2;
        let diag = structure.diagonal().iter().map(|d| d * inv_var).collect();
        let precision = SparseSym::from_entries(
            diag,
            graph.edges().map(|(i, j)| (i, j, -rho * inv_var)),
        );
        let factor = precision.cholesky()?;
        Ok(Self { rho, sigma_s2, precision, factor })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma_s2(&self) -> f64 {
        self.sigma_s2
    }

    pub fn precision(&self) -> &SparseSym {
        &self.precision
    }

    pub fn factor(&self) -> &SparseCholesky {
        &self.factor
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }

    /// Zero-mean Gaussian log density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = x.len() as f64;
        0.5 * (self.log_det() - self.precision.quad_form(x) - n * (2.0 * std::f64::consts::PI).ln())
    }

    /// Draws `z ~ MVN(0, precision⁻¹)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.precision.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.factor.whiten_inverse(&z)
    }
}
