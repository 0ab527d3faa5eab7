use crate::error::{Error, Result};
use crate::inner::StackedModel;
#[cfg(feature = "parallel")]
use crate::par::*;

use super::TaskGraph;

/// Union-symmetrized k-nearest-neighbour graph over the task models, with
/// every edge weight set to 1. Ties in distance go to the lower task index.
pub fn knn_graph(models: &StackedModel, k: usize) -> Result<TaskGraph> {
    let n = models.n_tasks();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "k-NN graph needs at least 2 tasks, got {n}"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k must satisfy 0 < k < {n}, got {k}"
        )));
    }
    if models.weights().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("task models".into()));
    }

    let neighbours = |i: usize| -> Vec<usize> {
        let wi = models.task(i);
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((&wi - models.task(j)).norm_squared(), j))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist.into_iter().take(k).map(|(_, j)| j).collect()
    };
    let lists: Vec<Vec<usize>> = crate::if_rayon!(
        (0..n)
            .into_par_iter()
            .with_min_len(MIN_PAR_LEN)
            .map(neighbours)
            .collect(),
        (0..n).map(neighbours).collect()
    );

    let mut pairs: Vec<(usize, usize)> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i.min(j), i.max(j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    TaskGraph::new(n, pairs.into_iter().map(|(i, j)| (i, j, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn models_1d(xs: &[f64]) -> StackedModel {
        StackedModel::new(DMatrix::from_column_slice(xs.len(), 1, xs)).unwrap()
    }

    #[test]
    fn nearest_neighbours_by_inspection() {
        let g = knn_graph(&models_1d(&[0.0, 1.0, 10.0]), 1).unwrap();
        assert_eq!(g.pairs(), vec![(0, 1), (1, 2)]);
        assert!(g.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn k_n_minus_one_is_complete() {
        let g = knn_graph(&models_1d(&[0.0, 1.0, 3.0, 7.0, 8.5]), 4).unwrap();
        assert_eq!(g.n_edges(), 10);
    }

    #[test]
    fn invalid_k() {
        let m = models_1d(&[0.0, 1.0, 2.0]);
        assert!(knn_graph(&m, 0).is_err());
        assert!(knn_graph(&m, 3).is_err());
        assert!(knn_graph(&models_1d(&[0.0]), 1).is_err());
    }
}
