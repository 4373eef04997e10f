//! Medication co-occurrence graph and its induced subgraphs.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::PatientRecord;
use crate::error::{Error, Result};

/// Undirected medication co-occurrence graph over the medication vocabulary.
/// Symmetric, with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EhrGraph {
    n: usize,
    adj: Vec<bool>,
}

/// On-disk form: upper-triangle edge list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl EhrGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adj: vec![false; n * n],
        }
    }

    /// Builds a graph from an edge list; edges are symmetrized and self loops ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(i, j) in edges {
            for x in [i, j] {
                if x >= n {
                    return Err(Error::IndexOutOfRange { index: x, size: n });
                }
            }
            g.connect(i, j);
        }
        Ok(g)
    }

    fn connect(&mut self, i: usize, j: usize) {
        if i != j {
            self.adj[i * self.n + j] = true;
            self.adj[j * self.n + i] = true;
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.has_edge(i, j)).collect()
    }

    /// Connects every pair in a visit-level medication set.
    pub fn add_clique(&mut self, meds: &[usize]) -> Result<()> {
        if let Some(&bad) = meds.iter().find(|&&m| m >= self.n) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: self.n,
            });
        }
        for (a, &i) in meds.iter().enumerate() {
            for &j in &meds[a + 1..] {
                self.connect(i, j);
            }
        }
        Ok(())
    }

    /// Edges with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&b| b).count() / 2
    }

    /// Row-major `n x n` attention mask: edges plus self loops.
    pub fn attention_mask(&self) -> Vec<bool> {
        let mut m = self.adj.clone();
        for i in 0..self.n {
            m[i * self.n + i] = true;
        }
        m
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            n: self.n,
            edges: self.edges(),
        }
    }

    pub fn from_file(file: &GraphFile) -> Result<Self> {
        Self::from_edges(file.n, &file.edges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_file())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: GraphFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_file(&file)
    }
}

/// Links every pair of medications prescribed together in one visit
/// (union over the visit's days).
pub fn build_cooccurrence_graph(records: &[PatientRecord], n: usize) -> Result<EhrGraph> {
    let mut g = EhrGraph::empty(n);
    for v in records.iter().flat_map(|r| r.visits.iter()) {
        g.add_clique(&v.medications())?;
    }
    Ok(g)
}

/// Subgraph induced by a medication set. Nodes are kept ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubGraph {
    nodes: Vec<usize>,
    adj: Vec<bool>,
}

/// Induces the subgraph over `med_set`; isolated nodes are retained.
pub fn subgraph(graph: &EhrGraph, med_set: &[usize]) -> Result<SubGraph> {
    let mut nodes = med_set.to_vec();
    nodes.sort_unstable();
    nodes.dedup();
    if nodes.is_empty() {
        return Err(Error::EmptySet);
    }
    if let Some(&bad) = nodes.iter().find(|&&m| m >= graph.n) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            size: graph.n,
        });
    }
    let k = nodes.len();
    let mut adj = vec![false; k * k];
    for (a, &i) in nodes.iter().enumerate() {
        for (b, &j) in nodes.iter().enumerate() {
            adj[a * k + b] = graph.has_edge(i, j);
        }
    }
    Ok(SubGraph { nodes, adj })
}

impl SubGraph {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, node: usize) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.position(node).is_some()
    }

    /// Edge test by local positions.
    pub fn has_local_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a * self.nodes.len() + b]
    }

    /// Edge test by medication index.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        match (self.position(i), self.position(j)) {
            (Some(a), Some(b)) => self.has_local_edge(a, b),
            _ => false,
        }
    }

    /// Restricts further to a subset of this subgraph's nodes.
    pub fn restrict(&self, med_set: &[usize]) -> Result<SubGraph> {
        let mut nodes = med_set.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        if nodes.is_empty() {
            return Err(Error::EmptySet);
        }
        let pos = nodes
            .iter()
            .map(|&m| self.position(m).ok_or(Error::NodeNotInSubgraph(m)))
            .collect::<Result<Vec<_>>>()?;
        let k = nodes.len();
        let mut adj = vec![false; k * k];
        for a in 0..k {
            for b in 0..k {
                adj[a * k + b] = self.has_local_edge(pos[a], pos[b]);
            }
        }
        Ok(SubGraph { nodes, adj })
    }

    /// Neighbors of `node` inside the subgraph that are not yet visited, ascending.
    pub fn unvisited_neighbors(&self, node: usize, visited: &HashSet<usize>) -> Result<Vec<usize>> {
        let a = self.position(node).ok_or(Error::NodeNotInSubgraph(node))?;
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter(|&(b, m)| self.has_local_edge(a, b) && !visited.contains(m))
            .map(|(_, &m)| m)
            .collect())
    }

    /// Adds `bridge` to the node set, wired per the full graph. A bridge with
    /// no edges into the set is connected to every member instead.
    pub fn with_bridge(&self, graph: &EhrGraph, bridge: usize) -> Result<SubGraph> {
        if bridge >= graph.n {
            return Err(Error::IndexOutOfRange {
                index: bridge,
                size: graph.n,
            });
        }
        if self.contains(bridge) {
            return Ok(self.clone());
        }
        let mut nodes = self.nodes.clone();
        let at = nodes.partition_point(|&m| m < bridge);
        nodes.insert(at, bridge);
        let wired = self.nodes.iter().any(|&m| graph.has_edge(bridge, m));
        let k = nodes.len();
        let mut adj = vec![false; k * k];
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                adj[a * k + b] = if i == bridge || j == bridge {
                    i != j && (!wired || graph.has_edge(i, j))
                } else {
                    self.has_edge(i, j)
                };
            }
        }
        Ok(SubGraph { nodes, adj })
    }

    /// Row-major `k x k` attention mask with self loops.
    pub fn attention_mask(&self) -> Vec<bool> {
        let k = self.nodes.len();
        let mut m = self.adj.clone();
        for i in 0..k {
            m[i * k + i] = true;
        }
        m
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let k = self.nodes.len();
        let mut seen = vec![false; k];
        let mut count = 0;
        for s in 0..k {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(a) = stack.pop() {
                for b in 0..k {
                    if !seen[b] && self.has_local_edge(a, b) {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
        }
        count
    }
}
