//! End-to-end fitting: per-task initialization, k-NN support, validation
//! split, hypergradient descent on the edge weights, and the final retrain.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{knn_graph, TaskGraph};
use crate::hypergrad::{update_edges, BilevelProblem, HyperParams, InnerState, Variant};
use crate::inner::{common_dim, ols_per_task, InnerSystem, StackedModel, TaskData};

/// Per-task validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// Splits every task into (train, validation). Each task keeps at least
    /// `max(2, ⌈d/2⌉)` training rows when it has enough rows, and at least
    /// one validation row.
    pub fn split(&self, data: &[TaskData]) -> Result<(Vec<TaskData>, Vec<TaskData>)> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        let d = common_dim(data)?;
        let min_train = 2.max(d.div_ceil(2));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut train = Vec::with_capacity(data.len());
        let mut val = Vec::with_capacity(data.len());
        for (i, t) in data.iter().enumerate() {
            let n = t.n_samples();
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "task {i} has {n} rows; an empty validation split would result"
                )));
            }
            let mut n_val = ((self.val_fraction * n as f64).round() as usize).max(1);
            if n - n_val < min_train {
                n_val = n.saturating_sub(min_train).max(1);
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (v, tr) = idx.split_at(n_val);
            train.push(t.select_rows(tr));
            val.push(t.select_rows(v));
        }
        Ok((train, val))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LearnedGraph,
    BaselineFixedGraph,
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Outer objective at the edges in force after this iteration.
    pub objective: f64,
    pub train_sse: f64,
    pub val_sse: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub models: StackedModel,
    /// k-NN support with the learned weights (zeros kept).
    pub graph: TaskGraph,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
    pub hyper_params: HyperParams,
}

impl FitResult {
    pub fn predict(&self, x: &DMatrix<f64>, task: usize) -> Result<DVector<f64>> {
        predict(&self.models, x, task)
    }
}

/// Learns the task models and the task graph.
pub fn fit(data: &[TaskData], hp: &HyperParams, split: &SplitSpec) -> Result<FitResult> {
    hp.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "fit needs at least 2 tasks, got {n}"
        )));
    }
    common_dim(data)?;

    let init = ols_per_task(data, hp.ridge)?;
    let support = knn_graph(&init, hp.k.min(n - 1))?;
    let (train, val) = split.split(data)?;
    let problem = BilevelProblem::new(&train, &val, &support, hp)?;

    let mut edges = vec![1.0; support.n_edges()];
    let mut state = problem.solve_inner(&edges, None)?;
    let mut objective = problem.objective_at(&state);
    let mut trace = vec![record(&problem, &state, 0, objective, 0.0, 0.0, true)];
    let mut adjoint: Option<DVector<f64>> = None;
    let mut stalled = 0;
    let mut converged = hp.max_outer == 0;

    for iteration in 1..=hp.max_outer {
        let ws = problem.hypergradient(&state, adjoint.as_ref())?;
        let grad_norm = ws.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        adjoint = Some(ws.adjoint);

        let mut step = hp.nu;
        let mut accepted = None;
        for _ in 0..=hp.max_halvings {
            let candidate = update_edges(&edges, &ws.grad, step);
            if candidate == edges {
                break;
            }
            let next = problem.solve_inner(&candidate, Some(&state))?;
            let next_obj = problem.objective_at(&next);
            if !hp.backtracking || next_obj <= objective {
                accepted = Some((candidate, next, next_obj));
                break;
            }
            step *= 0.5;
        }

        let change = match accepted {
            Some((candidate, next, next_obj)) => {
                let change = (objective - next_obj).abs() / objective.abs().max(f64::MIN_POSITIVE);
                edges = candidate;
                state = next;
                objective = next_obj;
                trace.push(record(
                    &problem, &state, iteration, objective, grad_norm, step, true,
                ));
                change
            }
            None => {
                trace.push(record(
                    &problem, &state, iteration, objective, grad_norm, 0.0, false,
                ));
                0.0
            }
        };
        debug!(
            "outer {iteration}: objective {objective:.6e}, |grad| {grad_norm:.3e}, step {step:.2e}"
        );

        stalled = if change < hp.tol_rel { stalled + 1 } else { 0 };
        if stalled >= hp.patience {
            converged = true;
            break;
        }
    }
    info!(
        "outer loop finished after {} iterations (converged: {converged})",
        trace.len() - 1
    );

    let graph = support.with_weights(&edges)?;
    let full = InnerSystem::new(data, hp.ridge, hp.solver)?;
    let pairs = graph.pairs();
    let models = match hp.variant {
        Variant::SqL2 => full.solve(&pairs, &edges, hp.lambda, None)?.models,
        Variant::L2 => {
            full.solve_l2(&pairs, &edges, hp.lambda, &hp.l2_options(), None)?
                .inner
                .models
        }
    };
    Ok(FitResult {
        method: if hp.max_outer == 0 {
            Method::BaselineFixedGraph
        } else {
            Method::LearnedGraph
        },
        models,
        graph,
        trace,
        converged,
        hyper_params: hp.clone(),
    })
}

fn record(
    problem: &BilevelProblem,
    state: &InnerState,
    iteration: usize,
    objective: f64,
    grad_norm: f64,
    step: f64,
    accepted: bool,
) -> TraceRecord {
    TraceRecord {
        iteration,
        objective,
        train_sse: problem.train_sse(state.models()),
        val_sse: problem.val_sse(state.models()),
        grad_norm,
        step,
        accepted,
    }
}

/// The fixed-graph comparator: the k-NN graph with unit weights, never updated.
pub fn baseline_fixed_graph(data: &[TaskData], hp: &HyperParams) -> Result<FitResult> {
    let hp = HyperParams {
        max_outer: 0,
        ..hp.clone()
    };
    fit(data, &hp, &SplitSpec::default())
}

/// `X · w_task`.
pub fn predict(models: &StackedModel, x: &DMatrix<f64>, task: usize) -> Result<DVector<f64>> {
    if task >= models.n_tasks() {
        return Err(Error::InvalidArgument(format!(
            "task {task} out of range for {} models",
            models.n_tasks()
        )));
    }
    if x.ncols() != models.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} columns for models of dimension {}",
            x.ncols(),
            models.dim()
        )));
    }
    Ok(x * models.task(task))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_tasks(n: usize, rows: usize) -> Vec<TaskData> {
        (0..n)
            .map(|t| {
                let x = DMatrix::from_fn(rows, 2, |r, c| ((r * 3 + c * 5 + t) % 7) as f64 - 3.0);
                let y = DVector::from_fn(rows, |r, _| (r % 3) as f64 + t as f64);
                TaskData::new(x, y).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_coverage() {
        let data = tiny_tasks(3, 12);
        let (tr, va) = SplitSpec::default().split(&data).unwrap();
        for (t, v) in tr.iter().zip(&va) {
            assert_eq!(v.n_samples(), 3);
            assert_eq!(t.n_samples(), 9);
        }
        let again = SplitSpec::default().split(&data).unwrap();
        assert_eq!(again.0, tr);
    }

    #[test]
    fn split_rejects_single_row_tasks() {
        let data = tiny_tasks(2, 1);
        assert!(SplitSpec::default().split(&data).is_err());
        let bad = SplitSpec {
            val_fraction: 1.0,
            seed: 0,
        };
        assert!(bad.split(&tiny_tasks(2, 4)).is_err());
    }

    #[test]
    fn predict_cases() {
        let m = StackedModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(
            predict(&m, &DMatrix::identity(2, 2), 1).unwrap(),
            DVector::from_vec(vec![3.0, 4.0])
        );
        assert_eq!(
            predict(&m, &DMatrix::zeros(3, 2), 0).unwrap(),
            DVector::zeros(3)
        );
        assert!(predict(&m, &DMatrix::zeros(3, 3), 0).is_err());
        assert!(predict(&m, &DMatrix::zeros(3, 2), 2).is_err());
    }

    #[test]
    fn fit_needs_two_tasks() {
        let data = tiny_tasks(1, 8);
        assert!(fit(&data, &HyperParams::default(), &SplitSpec::default()).is_err());
    }
}
