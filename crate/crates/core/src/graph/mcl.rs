use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::TaskGraph;
use crate::error::{Error, Result};

const MAX_ROUNDS: usize = 200;
const CHANGE_TOL: f64 = 1e-8;
const PRUNE_BELOW: f64 = 1e-12;
const SELF_LOOP: f64 = 1.0;

/// One cluster id per task; ids are contiguous from 0 in order of the lowest
/// task index they contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let n_clusters = labels.iter().max().map_or(0, |&m| m + 1);
        let mut seen = vec![false; n_clusters];
        for &l in &labels {
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(
                "cluster labels are not contiguous".into(),
            ));
        }
        Ok(ClusterAssignment { labels, n_clusters })
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Markov clustering: self-loops, column normalization, then alternating
/// expansion (squaring) and inflation until the matrix settles.
pub fn markov_cluster(graph: &TaskGraph, inflation: f64) -> Result<ClusterAssignment> {
    if !(inflation > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inflation must exceed 1, got {inflation}"
        )));
    }
    let n = graph.n_tasks();
    if n == 0 {
        return Ok(ClusterAssignment {
            labels: Vec::new(),
            n_clusters: 0,
        });
    }

    let mut m = graph.adjacency();
    for i in 0..n {
        m[(i, i)] += SELF_LOOP;
    }
    normalize_columns(&mut m);

    for _ in 0..MAX_ROUNDS {
        let mut next = &m * &m;
        next.apply(|v| *v = v.powf(inflation));
        normalize_columns(&mut next);
        next.apply(|v| {
            if *v < PRUNE_BELOW {
                *v = 0.0
            }
        });
        let change = (&next - &m).amax();
        m = next;
        if change < CHANGE_TOL {
            break;
        }
    }

    // clusters are the connected components of the converged flow pattern
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..n {
            if m[(i, j)] > 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut labels = vec![0; n];
    let mut next_id = 0;
    for (i, label) in labels.iter_mut().enumerate() {
        let root = find(&mut parent, i);
        if ids[root] == usize::MAX {
            ids[root] = next_id;
            next_id += 1;
        }
        *label = ids[root];
    }
    Ok(ClusterAssignment {
        labels,
        n_clusters: next_id,
    })
}

fn normalize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let s: f64 = col.sum();
        if s > 0.0 {
            col /= s;
        }
    }
}
