use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Undirected, connected PMU communication graph. Every node is its own neighbor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a graph on `nodes` vertices. Self-loops are implied; duplicate
    /// edges are merged.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if nodes == 0 {
            return Err(validation("topology needs at least one node"));
        }
        let mut sets: Vec<BTreeSet<usize>> = (0..nodes).map(|m| BTreeSet::from([m])).collect();
        for &(u, v) in edges {
            if u >= nodes || v >= nodes {
                return Err(validation(format!("edge ({u}, {v}) references a node outside 0..{nodes}")));
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let topo = Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        };
        if !topo.is_connected() {
            return Err(validation("communication graph is not connected"));
        }
        Ok(topo)
    }

    pub fn ring(nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(validation("a ring needs at least two nodes"));
        }
        let edges: Vec<_> = (0..nodes).map(|m| (m, (m + 1) % nodes)).collect();
        Self::from_edges(nodes, &edges)
    }

    pub fn complete(nodes: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for u in 0..nodes {
            for v in u + 1..nodes {
                edges.push((u, v));
            }
        }
        Self::from_edges(nodes, &edges)
    }

    /// Parses an edge list: one `u v` pair per line, 0-indexed. Blank lines and
    /// `#` comments are ignored. The node count is one past the largest id.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ids: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| validation(format!("line {}: invalid node id {s:?}", lineno + 1)))
            };
            match ids.as_slice() {
                [u, v] => edges.push((parse(u)?, parse(v)?)),
                _ => return Err(validation(format!("line {}: expected \"u v\"", lineno + 1))),
            }
        }
        let nodes = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
        Self::from_edges(nodes, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted, self-inclusive neighbor set `N_m`.
    pub fn neighbors(&self, m: usize) -> &[usize] {
        &self.neighbors[m]
    }

    pub fn degree(&self, m: usize) -> usize {
        self.neighbors[m].len()
    }

    pub fn is_neighbor(&self, m: usize, j: usize) -> bool {
        self.neighbors.get(m).is_some_and(|n| n.binary_search(&j).is_ok())
    }

    /// `N_m ∩ N_j`, ascending.
    pub fn common_neighbors(&self, m: usize, j: usize) -> Vec<usize> {
        self.neighbors[m]
            .iter()
            .copied()
            .filter(|i| self.neighbors[j].binary_search(i).is_ok())
            .collect()
    }

    /// Edges `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, n)| n.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.neighbors.iter().all(|n| n.len() == self.neighbors.len())
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.neighbors.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Textual topology selector: `ring:M`, `complete:M` or an edge-list path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopologySpec {
    Ring(usize),
    Complete(usize),
    EdgeList(String),
}

impl TopologySpec {
    /// Resolves the selector; edge lists are read through `read_file`.
    pub fn build(&self, read_file: impl FnOnce(&str) -> std::io::Result<String>) -> Result<Topology> {
        match self {
            Self::Ring(m) => Topology::ring(*m),
            Self::Complete(m) => Topology::complete(*m),
            Self::EdgeList(path) => {
                let text = read_file(path).map_err(|e| validation(format!("cannot read topology {path}: {e}")))?;
                Topology::parse_edge_list(&text)
            }
        }
    }
}

impl FromStr for TopologySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| validation(format!("invalid node count in topology {s:?}")))
        };
        if let Some(rest) = s.strip_prefix("ring:") {
            Ok(Self::Ring(count(rest)?))
        } else if let Some(rest) = s.strip_prefix("complete:") {
            Ok(Self::Complete(count(rest)?))
        } else if s.is_empty() {
            Err(validation("empty topology"))
        } else {
            Ok(Self::EdgeList(s.to_string()))
        }
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ring(m) => write!(f, "ring:{m}"),
            Self::Complete(m) => write!(f, "complete:{m}"),
            Self::EdgeList(p) => f.write_str(p),
        }
    }
}
