//! Self-checks: closed-form versus finite-difference hypergradients, and
//! per-stage timings of one outer iteration.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::knn_graph;
use crate::hypergrad::{BilevelProblem, HyperParams, Variant};
use crate::inner::ols_per_task;
use crate::linalg::{guard, SolverOptions};
use crate::synth::random_problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSpec {
    pub n: usize,
    pub d: usize,
    pub samples: usize,
    pub seed: u64,
    pub xi: f64,
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub variant: Variant,
    /// Finite-difference step.
    pub h: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            n: 5,
            d: 3,
            samples: 20,
            seed: 0,
            xi: 0.5,
            eta: 0.1,
            gamma: 0.2,
            lambda: 1.0,
            variant: Variant::SqL2,
            h: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub edges: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub max_rel_deviation: f64,
}

/// `‖a − b‖∞ / ‖b‖∞`, or the plain difference when `b` vanishes.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale > 1e-12 {
        diff / scale
    } else {
        diff
    }
}

/// Compares both gradients on a random instance with a complete graph.
pub fn gradient_check(spec: &GradCheckSpec) -> Result<GradCheck> {
    let p = random_problem(spec.n, spec.d, spec.samples, spec.seed)?;
    let hp = HyperParams {
        xi: spec.xi,
        eta: spec.eta,
        gamma: spec.gamma,
        lambda: spec.lambda,
        variant: spec.variant,
        ..HyperParams::default()
    };
    let edges = p.graph.weights();
    let problem = BilevelProblem::new(&p.train, &p.val, &p.graph, &hp)?;
    let state = problem.solve_inner(&edges, None)?;
    let closed_form = problem.hypergradient(&state, None)?.grad;
    let finite_difference = problem.fd_hypergradient(&edges, spec.h)?;
    let max_rel_deviation = relative_deviation(&closed_form, &finite_difference);
    Ok(GradCheck {
        edges,
        closed_form,
        finite_difference,
        max_rel_deviation,
    })
}

/// Wall-clock seconds per stage of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub n_edges: usize,
    pub ols_s: f64,
    pub knn_s: f64,
    pub inner_s: f64,
    pub hypergradient_s: f64,
    pub adjoint_iterations: usize,
    /// Largest dense buffer (elements) created during the inner and
    /// hypergradient stages.
    pub peak_dense_elems: usize,
    pub nd_squared: usize,
}

/// Times OLS, k-NN, one inner solve and one hypergradient on random data.
/// The inner and hypergradient stages run under a dense-allocation cap just
/// below `(nd)²`, which debug builds enforce with a panic. Dense direct
/// solves are switched off so small sizes time the same path as large ones.
pub fn profile_pipeline(
    n: usize,
    d: usize,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<StageTimings> {
    let p = random_problem(n, d, samples, seed)?;
    let defaults = HyperParams::default();
    // profile the iterative path at every size
    let hp = HyperParams {
        k,
        solver: SolverOptions {
            dense_threshold: 0,
            dense_fallback: 0,
            ..defaults.solver
        },
        ..defaults
    };

    let t = Instant::now();
    let init = ols_per_task(&p.train, 0.0)?;
    let ols_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let graph = knn_graph(&init, k.min(n - 1))?;
    let knn_s = t.elapsed().as_secs_f64();

    let nd = n * d;
    let nd_squared = nd * nd;
    let problem = BilevelProblem::new(&p.train, &p.val, &graph, &hp)?;
    let edges = vec![1.0; graph.n_edges()];

    guard::reset_peak();
    let _cap = guard::DenseLimit::new(nd_squared - 1);
    let t = Instant::now();
    let state = problem.solve_inner(&edges, None)?;
    let inner_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let ws = problem.hypergradient(&state, None)?;
    let hypergradient_s = t.elapsed().as_secs_f64();

    Ok(StageTimings {
        n,
        d,
        k,
        n_edges: graph.n_edges(),
        ols_s,
        knn_s,
        inner_s,
        hypergradient_s,
        adjoint_iterations: ws.adjoint_report.iterations,
        peak_dense_elems: guard::peak(),
        nd_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_helper() {
        assert_eq!(relative_deviation(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_deviation(&[1.0, 3.0], &[1.0, 2.0]), 0.5);
        assert_eq!(relative_deviation(&[1e-3], &[0.0]), 1e-3);
    }

    #[test]
    fn default_check_passes() {
        let c = gradient_check(&GradCheckSpec::default()).unwrap();
        assert!(c.max_rel_deviation < 1e-5, "{}", c.max_rel_deviation);
    }

    #[test]
    fn small_profile_stays_sparse() {
        let s = profile_pipeline(30, 10, 5, 30, 1).unwrap();
        assert!(s.peak_dense_elems < s.nd_squared);
        assert!(s.n_edges >= 30 * 5 / 2);
    }
}
