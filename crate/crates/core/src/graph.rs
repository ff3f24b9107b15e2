//! Undirected network topology with self-inclusive neighborhoods and
//! Laplacian-based connectivity analysis.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<Vec<bool>>,
    neighborhoods: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityReport {
    /// Laplacian eigenvalues, descending.
    pub laplacian_eigenvalues: Vec<f64>,
    pub algebraic_connectivity: f64,
    pub connected: bool,
    pub zero_multiplicity: usize,
}

/// On-disk form: `{"n": 3, "edges": [[1,2],[2,3]]}` with 1-based indices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TopologySpec {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

impl Topology {
    pub fn new(adjacency: Vec<Vec<bool>>) -> Result<Self> {
        build_topology(adjacency)
    }

    /// Builds from 0-based undirected edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![vec![false; n]; n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a},{b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop at node {a}")));
            }
            adj[a][b] = true;
            adj[b][a] = true;
        }
        build_topology(adj)
    }

    pub fn from_spec(spec: &TopologySpec) -> Result<Self> {
        let mut edges = Vec::with_capacity(spec.edges.len());
        for &[a, b] in &spec.edges {
            if a == 0 || b == 0 {
                return Err(Error::Validation("node indices are 1-based".into()));
            }
            edges.push((a - 1, b - 1));
        }
        Self::from_edges(spec.n, &edges)
    }

    pub fn to_spec(&self) -> TopologySpec {
        TopologySpec {
            n: self.n,
            edges: self.edges.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        }
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        Self::from_edges(n, &edges).expect("complete graph is valid")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|k| (k - 1, k)).collect();
        Self::from_edges(n, &edges).expect("path graph is valid")
    }

    pub fn ring(n: usize) -> Self {
        let mut edges: Vec<_> = (1..n).map(|k| (k - 1, k)).collect();
        if n > 2 {
            edges.push((0, n - 1));
        }
        Self::from_edges(n, &edges).expect("ring graph is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b]
    }

    /// `N_k`, ascending, always containing `k`.
    pub fn neighborhood(&self, k: usize) -> &[usize] {
        &self.neighborhoods[k]
    }

    pub fn in_neighborhood(&self, l: usize, k: usize) -> bool {
        l == k || self.adjacency[l][k]
    }

    /// Self-inclusive degree `n_k = |N_k|`.
    pub fn degree(&self, k: usize) -> usize {
        self.neighborhoods[k].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|k| self.degree(k)).collect()
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    /// Edges as sorted `(low, high)` pairs, 0-based.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Reachability by breadth-first search from node 0.
    pub fn is_connected_bfs(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for &l in &self.neighborhoods[k] {
                if !seen[l] {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut count = 0;
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(k) = stack.pop() {
                for &l in &self.neighborhoods[k] {
                    if !seen[l] {
                        seen[l] = true;
                        stack.push(l);
                    }
                }
            }
        }
        count
    }
}

pub fn build_topology(adjacency: Vec<Vec<bool>>) -> Result<Topology> {
    let n = adjacency.len();
    for (i, row) in adjacency.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Validation(format!(
                "adjacency row {i} has length {} (expected {n})",
                row.len()
            )));
        }
    }
    for i in 0..n {
        if adjacency[i][i] {
            return Err(Error::Validation(format!(
                "nonzero diagonal at node {i}: self-loops are implicit"
            )));
        }
        for j in 0..i {
            if adjacency[i][j] != adjacency[j][i] {
                return Err(Error::Validation(format!(
                    "asymmetric adjacency at pair ({j},{i})"
                )));
            }
        }
    }
    let neighborhoods = (0..n)
        .map(|k| (0..n).filter(|&l| l == k || adjacency[k][l]).collect())
        .collect();
    let edges = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|&(a, b)| adjacency[a][b])
        .collect();
    Ok(Topology {
        n,
        adjacency,
        neighborhoods,
        edges,
    })
}

/// `[L]_kk = n_k − 1`, `[L]_kℓ = −1` for neighbors.
pub fn laplacian(t: &Topology) -> DMatrix<f64> {
    let n = t.n();
    DMatrix::from_fn(n, n, |k, l| {
        if k == l {
            (t.degree(k) - 1) as f64
        } else if t.is_adjacent(k, l) {
            -1.0
        } else {
            0.0
        }
    })
}

/// One column per edge: `+1` at the lower index, `−1` at the higher.
pub fn incidence(t: &Topology) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(t.n(), t.edges().len());
    for (e, &(a, b)) in t.edges().iter().enumerate() {
        out[(a, e)] = 1.0;
        out[(b, e)] = -1.0;
    }
    out
}

/// Default zero threshold `1e−9·max(1, θ₁)`.
pub fn default_tolerance(theta_max: f64) -> f64 {
    1e-9 * theta_max.max(1.0)
}

pub fn connectivity_report(t: &Topology, tol: f64) -> Result<ConnectivityReport> {
    if !(tol > 0.0) {
        return Err(Error::Precondition("tolerance must be positive".into()));
    }
    let mut ev = linalg::sym_eigenvalues(&laplacian(t));
    ev.reverse();
    for x in ev.iter_mut() {
        if x.abs() <= tol {
            *x = x.abs();
        }
    }
    let zero_multiplicity = ev.iter().filter(|x| x.abs() <= tol).count();
    let algebraic_connectivity = if ev.len() >= 2 { ev[ev.len() - 2] } else { 0.0 };
    let spectral = if t.n() <= 1 {
        true
    } else {
        algebraic_connectivity > tol
    };
    let traversal = t.is_connected_bfs();
    if spectral != traversal || (t.n() > 0 && zero_multiplicity != t.component_count()) {
        return Err(Error::Internal(format!(
            "spectral connectivity ({spectral}, {zero_multiplicity} zero eigenvalues) disagrees \
             with traversal ({traversal}, {} components) at tol {tol:e}",
            t.component_count()
        )));
    }
    Ok(ConnectivityReport {
        laplacian_eigenvalues: ev,
        algebraic_connectivity,
        connected: spectral,
        zero_multiplicity,
    })
}

/// Report using the default scale-relative tolerance.
pub fn connectivity(t: &Topology) -> Result<ConnectivityReport> {
    let theta_max = linalg::max_sym_eigenvalue(&laplacian(t));
    connectivity_report(t, default_tolerance(theta_max))
}

/// Random geometric graph on the unit square: nodes closer than `radius`
/// are linked. Redrawn until connected.
pub fn random_geometric<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> Result<Topology> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::Validation("random graph needs n ≥ 1 and a positive radius".into()));
    }
    for _ in 0..10_000 {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let (dx, dy) = (pts[a].0 - pts[b].0, pts[a].1 - pts[b].1);
                if dx * dx + dy * dy < radius * radius {
                    edges.push((a, b));
                }
            }
        }
        let t = Topology::from_edges(n, &edges)?;
        if t.is_connected_bfs() {
            return Ok(t);
        }
    }
    Err(Error::Validation(format!("no connected graph found with radius {radius}")))
}
