//! Fuzzy graph-veracity measures and prediction error.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TaskGraph;
use crate::inner::{StackedModel, TaskData};

/// Disjunction used inside the fuzzy XOR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conorm {
    /// `min(a + b, 1)`.
    #[default]
    Lukasiewicz,
    /// `min(a, b)`. Breaks the crisp XOR truth table; kept for comparison.
    Godel,
}

fn check_unit(a: f64, b: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "fuzzy operands must lie in [0, 1], got ({a}, {b})"
        )))
    }
}

fn t_norm(a: f64, b: f64) -> f64 {
    // the clamp only removes rounding, e.g. 0.05 + 1 - 1 > 0.05
    (a + b - 1.0).max(0.0).min(a.min(b))
}

fn t_conorm(a: f64, b: f64, kind: Conorm) -> f64 {
    match kind {
        Conorm::Lukasiewicz => (a + b).min(1.0),
        Conorm::Godel => a.min(b),
    }
}

fn xor(a: f64, b: f64, kind: Conorm) -> f64 {
    t_norm(t_conorm(a, b, kind), 1.0 - t_norm(a, b))
}

pub fn tnorm(a: f64, b: f64) -> Result<f64> {
    check_unit(a, b)?;
    Ok(t_norm(a, b))
}

pub fn tconorm(a: f64, b: f64) -> Result<f64> {
    tconorm_with(a, b, Conorm::default())
}

pub fn tconorm_with(a: f64, b: f64, kind: Conorm) -> Result<f64> {
    check_unit(a, b)?;
    Ok(t_conorm(a, b, kind))
}

pub fn fuzzy_xor(a: f64, b: f64) -> Result<f64> {
    fuzzy_xor_with(a, b, Conorm::default())
}

pub fn fuzzy_xor_with(a: f64, b: f64, kind: Conorm) -> Result<f64> {
    check_unit(a, b)?;
    Ok(xor(a, b, kind))
}

/// Symmetric `[0, 1]` adjacency with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyAdjacency {
    matrix: DMatrix<f64>,
}

impl FuzzyAdjacency {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "adjacency must be square, got {}x{}",
                n,
                matrix.ncols()
            )));
        }
        for i in 0..n {
            if matrix[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "adjacency diagonal entry {i} is {}",
                    matrix[(i, i)]
                )));
            }
            for j in 0..n {
                let v = matrix[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency entry ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
                if v != matrix[(j, i)] {
                    return Err(Error::Asymmetric { row: i, col: j });
                }
            }
        }
        Ok(FuzzyAdjacency { matrix })
    }

    /// Normalized weighted adjacency of a graph.
    pub fn from_graph(graph: &TaskGraph) -> Self {
        normalize_adjacency(&graph.adjacency())
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.matrix
    }
}

/// Zeroes the diagonal and negative entries, scales by the largest entry and
/// symmetrizes by element-wise maximum. Non-square input is truncated to its
/// leading square block.
pub fn normalize_adjacency(raw: &DMatrix<f64>) -> FuzzyAdjacency {
    let n = raw.nrows().min(raw.ncols());
    let mut m = DMatrix::from_fn(n, n, |i, j| {
        let v = raw[(i, j)];
        if i == j || !(v > 0.0) {
            0.0
        } else {
            v
        }
    });
    let max = m.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 && max.is_finite() {
        m /= max;
    }
    for i in 0..n {
        for j in i + 1..n {
            let v = m[(i, j)].max(m[(j, i)]).min(1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    FuzzyAdjacency { matrix: m }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeracityReport {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn veracity(truth: &FuzzyAdjacency, predicted: &FuzzyAdjacency) -> Result<VeracityReport> {
    veracity_with(truth, predicted, Conorm::default())
}

pub fn veracity_with(
    truth: &FuzzyAdjacency,
    predicted: &FuzzyAdjacency,
    kind: Conorm,
) -> Result<VeracityReport> {
    let n = truth.n();
    if predicted.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "truth has {n} nodes, prediction has {}",
            predicted.n()
        )));
    }
    let (mut both, mut s1, mut s2, mut sx) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in truth.matrix.iter().zip(predicted.matrix.iter()) {
        both += t_norm(a, b);
        s1 += a;
        s2 += b;
        sx += xor(a, b, kind);
    }
    let recall = ratio(both, s1);
    let precision = ratio(both, s2);
    let accuracy = if n == 0 {
        1.0
    } else {
        1.0 - sx / (n * n) as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(VeracityReport {
        accuracy,
        recall,
        precision,
        f1,
    })
}

/// Veracity of a learned weighted graph against a reference graph.
pub fn graph_veracity(truth: &TaskGraph, learned: &TaskGraph) -> Result<VeracityReport> {
    veracity(
        &FuzzyAdjacency::from_graph(truth),
        &FuzzyAdjacency::from_graph(learned),
    )
}

/// Mean over tasks of the per-task root mean squared error.
pub fn rmse(models: &StackedModel, test: &[TaskData]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument(
            "rmse needs at least one task".into(),
        ));
    }
    let per_task = per_task_rmse(models, test)?;
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

pub fn per_task_rmse(models: &StackedModel, test: &[TaskData]) -> Result<Vec<f64>> {
    let sse = models.sse(test)?;
    sse.iter()
        .zip(test)
        .enumerate()
        .map(|(i, (s, t))| {
            if t.n_samples() == 0 {
                Err(Error::InvalidArgument(format!("task {i} has no test rows")))
            } else {
                Ok((s / t.n_samples() as f64).sqrt())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn operator_examples() {
        assert_relative_eq!(tnorm(0.7, 0.6).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(fuzzy_xor(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(fuzzy_xor(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(fuzzy_xor(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(fuzzy_xor(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(fuzzy_xor(0.5, 0.5).unwrap(), 1.0);
        assert!(tnorm(1.2, 0.0).is_err());
        assert!(fuzzy_xor(0.2, -0.1).is_err());
        assert_eq!(fuzzy_xor_with(1.0, 0.0, Conorm::Godel).unwrap(), 0.0);
    }

    #[test]
    fn normalization_examples() {
        let a = normalize_adjacency(&DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]));
        assert_eq!(
            a.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
        let neg = normalize_adjacency(&DMatrix::from_element(3, 3, -1.0));
        assert_eq!(neg.matrix(), &DMatrix::zeros(3, 3));
        let cov = DMatrix::from_row_slice(3, 3, &[9.0, 1.0, 0.5, 1.0, 8.0, -2.0, 0.5, -2.0, 7.0]);
        let c = normalize_adjacency(&cov);
        assert_eq!(c.matrix()[(0, 1)], 1.0);
        assert_eq!(c.matrix()[(0, 2)], 0.5);
        assert_eq!(c.matrix()[(1, 2)], 0.0);
        assert!(FuzzyAdjacency::new(c.matrix().clone()).is_ok());
    }

    #[test]
    fn perfect_and_complement() {
        let t = FuzzyAdjacency::new(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        ))
        .unwrap();
        let r = veracity(&t, &t).unwrap();
        assert_eq!(
            (r.accuracy, r.recall, r.precision, r.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let comp = DMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                0.0
            } else {
                1.0 - t.matrix()[(i, j)]
            }
        });
        let r = veracity(&t, &FuzzyAdjacency::new(comp).unwrap()).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn empty_graphs_are_total() {
        let z = FuzzyAdjacency::new(DMatrix::zeros(3, 3)).unwrap();
        let r = veracity(&z, &z).unwrap();
        assert_eq!((r.recall, r.precision, r.accuracy), (1.0, 1.0, 1.0));
        let t = FuzzyAdjacency::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let r = veracity(&t, &FuzzyAdjacency::new(DMatrix::zeros(2, 2)).unwrap()).unwrap();
        assert_eq!((r.recall, r.precision), (0.0, 1.0));
        assert!(veracity(&t, &z).is_err());
    }

    #[test]
    fn rmse_examples() {
        let m = StackedModel::new(DMatrix::from_row_slice(2, 1, &[2.0, -1.0])).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let exact = vec![
            TaskData::new(x.clone(), &x * 2.0 * DVector::from_element(1, 1.0)).unwrap(),
            TaskData::new(x.clone(), -&x.column(0)).unwrap(),
        ];
        assert_eq!(rmse(&m, &exact).unwrap(), 0.0);
        let shifted: Vec<TaskData> = exact
            .iter()
            .map(|t| TaskData::new(t.x.clone(), t.y.add_scalar(0.5)).unwrap())
            .collect();
        assert_relative_eq!(rmse(&m, &shifted).unwrap(), 0.5, epsilon = 1e-15);
        assert!(rmse(&m, &[]).is_err());
    }
}
