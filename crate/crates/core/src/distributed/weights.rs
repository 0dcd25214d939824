use serde::{Deserialize, Serialize};

use super::Topology;
use crate::error::{validation, Result};

const SUM_TOL: f64 = 1e-12;

/// Diffusion factors `c[m][j]`, stored in neighbor-list order of `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionWeights {
    rows: Vec<Vec<f64>>,
}

impl DiffusionWeights {
    /// `c[m][j] = 1 / |N_m|`.
    pub fn uniform(topology: &Topology) -> Self {
        let rows = (0..topology.node_count())
            .map(|m| {
                let d = topology.degree(m);
                vec![1.0 / d as f64; d]
            })
            .collect();
        Self { rows }
    }

    /// Custom weights from a dense `M x M` table; entries outside `N_m` must be zero.
    pub fn from_dense(topology: &Topology, table: &[Vec<f64>]) -> Result<Self> {
        let n = topology.node_count();
        if table.len() != n || table.iter().any(|r| r.len() != n) {
            return Err(validation(format!("diffusion weight table must be {n}x{n}")));
        }
        for (m, row) in table.iter().enumerate() {
            if row.iter().enumerate().any(|(j, &w)| w != 0.0 && !topology.is_neighbor(m, j)) {
                return Err(validation(format!("node {m} has weight on a non-neighbor")));
            }
        }
        let rows = (0..n)
            .map(|m| topology.neighbors(m).iter().map(|&j| table[m][j]).collect())
            .collect();
        let w = Self { rows };
        w.validate(topology)?;
        Ok(w)
    }

    pub fn validate(&self, topology: &Topology) -> Result<()> {
        if self.rows.len() != topology.node_count() {
            return Err(validation("diffusion weights do not match topology size"));
        }
        for (m, row) in self.rows.iter().enumerate() {
            if row.len() != topology.degree(m) {
                return Err(validation(format!("node {m}: one weight per neighbor required")));
            }
            check_row(row, || format!("c[{m}]"))?;
        }
        Ok(())
    }

    /// Weights of node `m` in the order of `topology.neighbors(m)`.
    pub fn row(&self, m: usize) -> &[f64] {
        &self.rows[m]
    }

    pub fn get(&self, topology: &Topology, m: usize, j: usize) -> Option<f64> {
        let pos = topology.neighbors(m).binary_search(&j).ok()?;
        Some(self.rows[m][pos])
    }
}

/// Amplitude diffusion factors `d[m][j][i]` for `j ∈ N_m`, `i ∈ N_m ∩ N_j`,
/// stored in ascending order of `j` and `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedDiffusionWeights {
    rows: Vec<Vec<Vec<f64>>>,
}

impl ReducedDiffusionWeights {
    /// `d[m][j][i] = 1 / |N_m ∩ N_j|`.
    pub fn uniform(topology: &Topology) -> Self {
        let rows = (0..topology.node_count())
            .map(|m| {
                topology
                    .neighbors(m)
                    .iter()
                    .map(|&j| {
                        let k = topology.common_neighbors(m, j).len();
                        vec![1.0 / k as f64; k]
                    })
                    .collect()
            })
            .collect();
        Self { rows }
    }

    /// Custom weights from `weight(m, j, i)`.
    pub fn from_fn(topology: &Topology, weight: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let rows = (0..topology.node_count())
            .map(|m| {
                topology
                    .neighbors(m)
                    .iter()
                    .map(|&j| topology.common_neighbors(m, j).into_iter().map(|i| weight(m, j, i)).collect())
                    .collect()
            })
            .collect();
        let w = Self { rows };
        w.validate(topology)?;
        Ok(w)
    }

    pub fn validate(&self, topology: &Topology) -> Result<()> {
        if self.rows.len() != topology.node_count() {
            return Err(validation("reduced weights do not match topology size"));
        }
        for (m, per_j) in self.rows.iter().enumerate() {
            if per_j.len() != topology.degree(m) {
                return Err(validation(format!("node {m}: one weight row per neighbor required")));
            }
            for (&j, row) in topology.neighbors(m).iter().zip(per_j) {
                if row.len() != topology.common_neighbors(m, j).len() {
                    return Err(validation(format!("d[{m}][{j}] must cover N_m ∩ N_j")));
                }
                check_row(row, || format!("d[{m}][{j}]"))?;
            }
        }
        Ok(())
    }

    /// Weights for `j` (by position in `N_m`), ordered like `common_neighbors(m, j)`.
    pub fn row(&self, m: usize, j_pos: usize) -> &[f64] {
        &self.rows[m][j_pos]
    }
}

fn check_row(row: &[f64], name: impl Fn() -> String) -> Result<()> {
    if row.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
        return Err(validation(format!("{}: weights must be non-negative", name())));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(validation(format!("{}: weights sum to {sum}, expected 1", name())));
    }
    Ok(())
}
