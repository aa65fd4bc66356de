//! Time-varying communication graphs and their mixing matrices.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{ArgusError, Result};

/// Maximum number of Erdos-Renyi draws before giving up on connectivity.
pub const MAX_RESAMPLES: usize = 10_000;

/// Undirected graph with self-loops on every node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    agents: usize,
    adjacency: Vec<bool>,
    /// Iteration this graph was drawn for.
    pub t: usize,
}

impl Topology {
    /// Builds a topology from undirected edges; self-loops are added.
    pub fn from_edges(agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if agents == 0 {
            return Err(ArgusError::invalid("topology needs at least one agent"));
        }
        let mut adjacency = vec![false; agents * agents];
        for i in 0..agents {
            adjacency[i * agents + i] = true;
        }
        for &(i, j) in edges {
            if i >= agents || j >= agents {
                return Err(ArgusError::invalid(format!("edge ({i},{j}) out of range for {agents} agents")));
            }
            adjacency[i * agents + j] = true;
            adjacency[j * agents + i] = true;
        }
        Ok(Self { agents, adjacency, t: 0 })
    }

    pub fn complete(agents: usize) -> Self {
        Self {
            agents,
            adjacency: vec![true; agents * agents],
            t: 0,
        }
    }

    pub fn path(agents: usize) -> Self {
        let edges: Vec<_> = (1..agents).map(|i| (i - 1, i)).collect();
        Self::from_edges(agents, &edges).expect("path edges are in range")
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.agents + j]
    }

    /// Neighbors of `i` including `i` itself, in increasing order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.agents).filter(move |&j| self.connected(i, j))
    }

    /// Degree excluding the self-loop.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).filter(|&j| j != i).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.agents).all(|i| (0..self.agents).all(|j| self.connected(i, j) == self.connected(j, i)))
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.agents];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Off-diagonal edge density in `[0, 1]`.
    pub fn density(&self) -> f64 {
        if self.agents < 2 {
            return 1.0;
        }
        let pairs = self.agents * (self.agents - 1) / 2;
        let edges = (0..self.agents)
            .flat_map(|i| ((i + 1)..self.agents).map(move |j| (i, j)))
            .filter(|&(i, j)| self.connected(i, j))
            .count();
        edges as f64 / pairs as f64
    }

    /// Writes one `t,i,j` line per undirected edge (`i < j`).
    pub fn write_edges<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for i in 0..self.agents {
            for j in (i + 1)..self.agents {
                if self.connected(i, j) {
                    writeln!(out, "{},{},{}", self.t, i, j)?;
                }
            }
        }
        Ok(())
    }
}

/// Erdos-Renyi graph with edge probability `p_c`, redrawn until connected.
pub fn sample_er_topology<R: Rng + ?Sized>(agents: usize, p_c: f64, t: usize, rng: &mut R) -> Result<Topology> {
    if agents < 2 {
        return Err(ArgusError::invalid(format!("Erdos-Renyi sampling needs at least 2 agents, got {agents}")));
    }
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(ArgusError::invalid(format!("connectivity probability must lie in (0, 1], got {p_c}")));
    }
    for _ in 0..MAX_RESAMPLES {
        let mut adjacency = vec![false; agents * agents];
        for i in 0..agents {
            adjacency[i * agents + i] = true;
            for j in (i + 1)..agents {
                if rng.random::<f64>() < p_c {
                    adjacency[i * agents + j] = true;
                    adjacency[j * agents + i] = true;
                }
            }
        }
        let topo = Topology { agents, adjacency, t };
        if topo.is_connected() {
            return Ok(topo);
        }
    }
    Err(ArgusError::Generation(format!(
        "no connected graph after {MAX_RESAMPLES} draws (N={agents}, p_c={p_c})"
    )))
}

/// Symmetric doubly-stochastic gossip matrix and its contraction factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    agents: usize,
    weights: Vec<f64>,
    pub rho: f64,
}

impl MixingMatrix {
    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.agents + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.agents..(i + 1) * self.agents]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Agents with a positive weight in row `i` (including `i`).
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(j, _)| j)
    }

    /// Average number of non-zero entries per row (self-loops included).
    pub fn average_degree(&self) -> f64 {
        self.weights.iter().filter(|w| **w > 0.0).count() as f64 / self.agents as f64
    }

    /// `W z` for agent-stacked vectors.
    pub fn mix(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..self.agents)
            .map(|i| {
                let mut out = vec![0.0; rows[i].len()];
                for j in self.neighbors(i) {
                    crate::vecops::axpy(self.get(i, j), &rows[j], &mut out);
                }
                out
            })
            .collect()
    }

    /// Checks the sparsity, symmetry, stochasticity and spectral conditions
    /// against `topo`; returns every violated condition.
    pub fn check_assumptions(&self, topo: &Topology, tol: f64) -> std::result::Result<(), Vec<String>> {
        let n = self.agents;
        let mut errs = Vec::new();
        if topo.agents() != n {
            errs.push(format!("size mismatch: W is {n}x{n}, topology has {} agents", topo.agents()));
            return Err(errs);
        }
        for i in 0..n {
            for j in 0..n {
                let w = self.get(i, j);
                if topo.connected(i, j) != (w > 0.0) {
                    errs.push(format!("W[{i},{j}]={w} disagrees with edge set"));
                }
                if w < 0.0 {
                    errs.push(format!("W[{i},{j}]={w} negative"));
                }
                if (w - self.get(j, i)).abs() > tol {
                    errs.push(format!("W not symmetric at ({i},{j})"));
                }
            }
            let s: f64 = self.row(i).iter().sum();
            if (s - 1.0).abs() > tol {
                errs.push(format!("row {i} sums to {s}"));
            }
        }
        match symmetric_eigenvalues(&self.weights, n) {
            Ok(ev) => {
                if let Some(bad) = ev.iter().find(|&&l| l <= -1.0 + tol || l > 1.0 + tol) {
                    errs.push(format!("eigenvalue {bad} outside (-1, 1]"));
                }
                // null(I - W) = span{e}: eigenvalue 1 must be simple.
                let ones = ev.iter().filter(|&&l| (l - 1.0).abs() <= 1e-9).count();
                if ones != 1 {
                    errs.push(format!("eigenvalue 1 has multiplicity {ones}"));
                }
            }
            Err(e) => errs.push(e.to_string()),
        }
        if !(self.rho < 1.0) {
            errs.push(format!("rho = {} is not below 1", self.rho));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Metropolis-Hastings weights `W_ij = 1 / (1 + max(deg i, deg j))`.
pub fn metropolis_weights(topo: &Topology) -> Result<MixingMatrix> {
    if !topo.is_symmetric() {
        return Err(ArgusError::invalid("topology is not symmetric"));
    }
    if !topo.is_connected() {
        return Err(ArgusError::invalid("topology is not connected"));
    }
    let n = topo.agents();
    let deg: Vec<usize> = (0..n).map(|i| topo.degree(i)).collect();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let mut off = 0.0;
        for j in topo.neighbors(i).filter(|&j| j != i) {
            let w = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
            weights[i * n + j] = w;
            off += w;
        }
        weights[i * n + i] = 1.0 - off;
    }
    let rho = spectral_gap(&weights, n)?;
    Ok(MixingMatrix { agents: n, weights, rho })
}

fn symmetric_eigenvalues(w: &[f64], n: usize) -> Result<Vec<f64>> {
    if w.len() != n * n {
        return Err(ArgusError::invalid(format!("expected {} entries, got {}", n * n, w.len())));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (w[i * n + j], w[j * n + i]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(ArgusError::invalid(format!("matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    let m = DMatrix::from_row_slice(n, n, w);
    Ok(SymmetricEigen::new(m).eigenvalues.iter().copied().collect())
}

/// `rho = || W - (1/N) e e^T ||_2` for a symmetric row-stochastic `W`.
pub fn spectral_gap(w: &[f64], n: usize) -> Result<f64> {
    let mut centered = w.to_vec();
    let avg = 1.0 / n as f64;
    centered.iter_mut().for_each(|v| *v -= avg);
    let ev = symmetric_eigenvalues(&centered, n)?;
    Ok(ev.iter().fold(0.0f64, |acc, l| acc.max(l.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    #[test]
    fn two_node_full_probability() {
        let mut rng = substream(1, Stream::Topology, 0);
        let topo = sample_er_topology(2, 1.0, 0, &mut rng).unwrap();
        assert_eq!(topo, Topology::complete(2));
        let topo = sample_er_topology(3, 1.0, 0, &mut rng).unwrap();
        assert!((0..3).all(|i| (0..3).all(|j| topo.connected(i, j))));
    }

    #[test]
    fn path_graph_weights() {
        let w = metropolis_weights(&Topology::path(3)).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0];
        for (a, b) in w.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((w.rho - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_agent() {
        let w = metropolis_weights(&Topology::complete(1)).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
        assert!(w.rho.abs() < 1e-15);
    }

    #[test]
    fn spectral_gap_edge_cases() {
        let n = 4;
        let avg = vec![0.25; n * n];
        assert!(spectral_gap(&avg, n).unwrap().abs() < 1e-12);
        let identity = [1.0, 0.0, 0.0, 1.0];
        assert!((spectral_gap(&identity, 2).unwrap() - 1.0).abs() < 1e-12);
        assert!(spectral_gap(&[0.5, 0.4, 0.6, 0.5], 2).is_err());
    }

    #[test]
    fn disconnected_graph_rejected() {
        let topo = Topology::from_edges(3, &[(0, 1)]).unwrap();
        assert!(metropolis_weights(&topo).is_err());
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut rng = substream(1, Stream::Topology, 0);
        assert!(sample_er_topology(5, 0.0, 0, &mut rng).is_err());
        assert!(sample_er_topology(5, 1.5, 0, &mut rng).is_err());
        assert!(matches!(
            sample_er_topology(60, 1e-9, 0, &mut rng),
            Err(ArgusError::Generation(_))
        ));
    }

    #[test]
    fn er_weights_satisfy_assumptions() {
        for seed in 0..50 {
            let mut rng = substream(seed, Stream::Topology, 0);
            let topo = sample_er_topology(10, 0.5, 0, &mut rng).unwrap();
            let w = metropolis_weights(&topo).unwrap();
            w.check_assumptions(&topo, 1e-12).unwrap();
        }
    }

    #[test]
    fn edge_dump_format() {
        let mut buf = Vec::new();
        let mut topo = Topology::path(3);
        topo.t = 4;
        topo.write_edges(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "4,0,1\n4,1,2\n");
    }
}
