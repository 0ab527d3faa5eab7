//! The task-relationship graph and the operations that build, sparsify,
//! cluster and export it.

mod export;
mod knn;
mod mcl;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use export::{export_graph, import_graph_json, GraphFormat, GraphJson};
pub use knn::knn_graph;
pub use mcl::{markov_cluster, ClusterAssignment};

use crate::error::{Error, Result};
use crate::linalg::{laplacian_from_edges, SparseMatrix};

/// Weighted undirected graph over tasks.
///
/// Edges are stored as `(i, j, w)` with `i < j`, sorted, without duplicates,
/// and with `w ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphJson", into = "GraphJson")]
pub struct TaskGraph {
    n_tasks: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl TaskGraph {
    pub fn new(
        n_tasks: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut out: Vec<(usize, usize, f64)> = Vec::new();
        for (a, b, w) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop on task {a}")));
            }
            if a >= n_tasks || b >= n_tasks {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) outside a graph of {n_tasks} tasks"
                )));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a}, {b}) has weight {w} outside [0, 1]"
                )));
            }
            out.push((a.min(b), a.max(b), w));
        }
        out.sort_by_key(|x| (x.0, x.1));
        if let Some(dup) = out
            .windows(2)
            .find(|p| (p[0].0, p[0].1) == (p[1].0, p[1].1))
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate edge ({}, {})",
                dup[0].0, dup[0].1
            )));
        }
        Ok(TaskGraph {
            n_tasks,
            edges: out,
        })
    }

    pub fn empty(n_tasks: usize) -> Self {
        TaskGraph {
            n_tasks,
            edges: Vec::new(),
        }
    }

    pub fn complete(n_tasks: usize, weight: f64) -> Result<Self> {
        let edges = (0..n_tasks).flat_map(|i| (i + 1..n_tasks).map(move |j| (i, j, weight)));
        Self::new(n_tasks, edges)
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(i, j, _)| (i, j)).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.2).collect()
    }

    /// Same support, new weights (in edge order).
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.edges.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} edges",
                weights.len(),
                self.edges.len()
            )));
        }
        Self::new(
            self.n_tasks,
            self.edges
                .iter()
                .zip(weights)
                .map(|(&(i, j, _), &w)| (i, j, w)),
        )
    }

    /// Removes edges whose weight is below `threshold`; the node set is kept.
    pub fn prune(&self, threshold: f64) -> Self {
        TaskGraph {
            n_tasks: self.n_tasks,
            edges: self
                .edges
                .iter()
                .copied()
                .filter(|e| e.2 >= threshold)
                .collect(),
        }
    }

    pub fn incidence(&self) -> IncidenceView {
        IncidenceView::new(self.n_tasks, self.pairs())
    }

    pub fn laplacian(&self) -> SparseMatrix {
        laplacian_from_edges(&self.incidence().matrix, &self.weights())
            .expect("a valid task graph always yields a valid laplacian")
    }

    /// Symmetric weighted adjacency with zero diagonal.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_tasks, self.n_tasks);
        for &(i, j, w) in &self.edges {
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
        a
    }

    /// Unit-weight graph from the nonzero off-diagonal pattern of a
    /// symmetric matrix.
    pub fn from_adjacency(adj: &DMatrix<f64>) -> Result<Self> {
        if !adj.is_square() {
            return Err(Error::DimensionMismatch("adjacency must be square".into()));
        }
        let n = adj.nrows();
        let edges = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| adj[(i, j)] != 0.0 || adj[(j, i)] != 0.0)
            .map(|(i, j)| (i, j, 1.0));
        Self::new(n, edges)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_tasks];
        for &(i, j, _) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }
}

/// Oriented incidence matrix with a fixed column order.
///
/// Column `k` holds `+1` at row `i` and `-1` at row `j` for
/// `edge_order[k] = (i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceView {
    pub matrix: SparseMatrix,
    pub edge_order: Vec<(usize, usize)>,
}

impl IncidenceView {
    pub fn new(n_tasks: usize, edge_order: Vec<(usize, usize)>) -> Self {
        let triplets = edge_order
            .iter()
            .enumerate()
            .flat_map(|(k, &(i, j))| [(i, k, 1.0), (j, k, -1.0)])
            .collect();
        let matrix = SparseMatrix::from_triplets(n_tasks, edge_order.len(), triplets)
            .expect("edge endpoints are in range");
        IncidenceView { matrix, edge_order }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_edges() {
        assert!(TaskGraph::new(3, [(1, 1, 0.5)]).is_err());
        assert!(TaskGraph::new(3, [(0, 3, 0.5)]).is_err());
        assert!(TaskGraph::new(3, [(0, 1, 1.5)]).is_err());
        assert!(TaskGraph::new(3, [(0, 1, 0.5), (1, 0, 0.2)]).is_err());
    }

    #[test]
    fn edges_are_normalized_and_sorted() {
        let g = TaskGraph::new(3, [(2, 1, 0.5), (1, 0, 0.25)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1, 0.25), (1, 2, 0.5)]);
    }

    #[test]
    fn prune_cases() {
        let g = TaskGraph::new(3, [(0, 1, 0.9), (1, 2, 1e-6)]).unwrap();
        assert_eq!(g.prune(1e-3).edges(), &[(0, 1, 0.9)]);
        assert_eq!(g.prune(0.0), g);
        let none = g.prune(0.95);
        assert_eq!(none.n_edges(), 0);
        assert_eq!(none.n_tasks(), 3);
    }

    #[test]
    fn incidence_columns() {
        let g = TaskGraph::new(3, [(0, 2, 1.0), (1, 2, 1.0)]).unwrap();
        let inc = g.incidence();
        assert_eq!(inc.matrix.get(0, 0), 1.0);
        assert_eq!(inc.matrix.get(2, 0), -1.0);
        assert_eq!(inc.matrix.get(1, 1), 1.0);
        assert_eq!(inc.matrix.get(2, 1), -1.0);
        assert_eq!(inc.matrix.get(0, 1), 0.0);
    }

    #[test]
    fn laplacian_off_diagonals_are_negative_weights() {
        let g = TaskGraph::new(4, [(0, 1, 0.3), (1, 3, 0.7), (0, 2, 1.0)]).unwrap();
        let l = g.laplacian();
        for &(i, j, w) in g.edges() {
            assert_eq!(l.get(i, j), -w);
            assert_eq!(l.get(j, i), -w);
        }
    }

    #[test]
    fn adjacency_round_trip() {
        let g = TaskGraph::new(4, [(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        assert_eq!(TaskGraph::from_adjacency(&g.adjacency()).unwrap(), g);
    }
}
