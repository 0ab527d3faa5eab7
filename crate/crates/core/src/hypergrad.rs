//! Outer objective over edge weights and its exact hypergradient.
//!
//! The outer objective is
//! `f(e) = ½ Σ‖X_i^val w_i(e) − y_i^val‖² + ½ ξ‖e‖² + η‖e‖₁ + γ H(e)` with
//! `H(e) = −Σ(e ln e − e)`. Differentiating through the inner optimum
//! `A V = XᵀY` gives, per edge `(i, j)`,
//!
//! `∂f/∂e_ij = ξ e_ij + η − γ ln e_ij − λ (w_i − w_j)ᵀ (s_i − s_j)`
//!
//! where `s = A⁻¹ C` is a single adjoint solve against
//! `C = X^valᵀ (X^val V − Y^val)`. No Kronecker product is ever formed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TaskGraph;
use crate::inner::{InnerSolution, InnerSystem, L2Options, StackedModel, TaskData};
use crate::linalg::{
    bounded_least_squares, guard, BlockDiagOperator, Preconditioner, SolverOptions, SpdSolveReport,
    SpdSystem,
};
#[cfg(feature = "parallel")]
use crate::par::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Squared ℓ2 (Dirichlet energy) smoothing in the inner problem.
    #[default]
    SqL2,
    /// Non-squared ℓ2 smoothing, solved by reweighting.
    L2,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sq_l2" => Ok(Variant::SqL2),
            "l2" => Ok(Variant::L2),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected sq_l2 or l2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Weight of `½‖e‖²`.
    pub xi: f64,
    /// Weight of `‖e‖₁`.
    pub eta: f64,
    /// Weight of the edge entropy.
    pub gamma: f64,
    /// Graph smoothing strength of the inner problem.
    pub lambda: f64,
    /// Outer step size.
    pub nu: f64,
    /// Neighbours per task in the initial graph.
    pub k: usize,
    pub variant: Variant,
    /// Lower clamp on `‖w_i − w_j‖` in the reweights.
    pub eps_guard: f64,
    /// Lower clamp inside the entropy gradient's logarithm.
    pub eps_log: f64,
    pub l2_tol: f64,
    pub l2_max_rounds: usize,
    /// Relative objective change counted as stalled.
    pub tol_rel: f64,
    /// Consecutive stalled iterations before stopping.
    pub patience: usize,
    pub max_outer: usize,
    pub backtracking: bool,
    pub max_halvings: usize,
    /// Tikhonov term added to every task's normal equations.
    pub ridge: f64,
    pub solver: SolverOptions,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            xi: 0.0,
            eta: 0.0,
            gamma: 1.0,
            lambda: 1.0,
            nu: 1e-3,
            k: 5,
            variant: Variant::SqL2,
            eps_guard: 1e-8,
            eps_log: 1e-8,
            l2_tol: 1e-5,
            l2_max_rounds: 50,
            tol_rel: 1e-4,
            patience: 3,
            max_outer: 500,
            backtracking: true,
            max_halvings: 20,
            ridge: 0.0,
            solver: SolverOptions {
                preconditioner: Preconditioner::TaskBlocks,
                ..SolverOptions::default()
            },
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("xi", self.xi),
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("nu", self.nu),
            ("ridge", self.ridge),
            ("lambda", self.lambda),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        let positive = [
            ("eps_guard", self.eps_guard),
            ("eps_log", self.eps_log),
            ("l2_tol", self.l2_tol),
            ("tol_rel", self.tol_rel),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn l2_options(&self) -> L2Options {
        L2Options {
            eps_guard: self.eps_guard,
            tol: self.l2_tol,
            max_rounds: self.l2_max_rounds,
        }
    }
}

/// `H(e) = −Σ(|e| ln|e| − |e|)` with `0 ln 0 = 0`.
pub fn entropy(edges: &[f64]) -> f64 {
    -edges
        .iter()
        .map(|e| {
            let a = e.abs();
            if a == 0.0 {
                0.0
            } else {
                a * a.ln() - a
            }
        })
        .sum::<f64>()
}

/// `½ ξ‖e‖² + η‖e‖₁ + γ H(e)`.
pub fn edge_regularizer(edges: &[f64], hp: &HyperParams) -> f64 {
    let sq: f64 = edges.iter().map(|e| e * e).sum();
    let l1: f64 = edges.iter().map(|e| e.abs()).sum();
    0.5 * hp.xi * sq + hp.eta * l1 + hp.gamma * entropy(edges)
}

/// Outer objective: half the validation SSE plus the edge regularizers.
pub fn outer_objective(
    models: &StackedModel,
    edges: &[f64],
    val_data: &[TaskData],
    hp: &HyperParams,
) -> Result<f64> {
    let sse: f64 = models.sse(val_data)?.iter().sum();
    Ok(0.5 * sse + edge_regularizer(edges, hp))
}

fn regularizer_gradient(e: f64, hp: &HyperParams) -> f64 {
    // sign(e) = 1 on the nonnegative orthant; exact zeros get no entropy pull
    let entropy_part = if e == 0.0 {
        0.0
    } else {
        e.max(hp.eps_log).ln()
    };
    hp.xi * e + hp.eta - hp.gamma * entropy_part
}

/// Inner optimum at a given edge vector, plus the reweights of the
/// non-squared variant when that variant is active.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub edges: Vec<f64>,
    pub solution: InnerSolution,
    /// Frozen `l` used for the effective weights `e ∘ l` (non-squared only).
    pub reweights: Option<Vec<f64>>,
}

impl InnerState {
    pub fn models(&self) -> &StackedModel {
        &self.solution.models
    }
}

/// Everything the hypergradient needs besides the edge vector.
#[derive(Debug, Clone)]
pub struct BilevelProblem {
    train: InnerSystem,
    val_designs: BlockDiagOperator,
    val_targets: Vec<DVector<f64>>,
    pairs: Vec<(usize, usize)>,
    hp: HyperParams,
}

/// Intermediate quantities of one hypergradient evaluation.
#[derive(Debug, Clone)]
pub struct HypergradWorkspace {
    /// `X^valᵀ (X^val V − Y^val)`.
    pub c: DVector<f64>,
    /// `A⁻¹ C` (`A` is symmetric, so this is also `A⁻ᵀ C`).
    pub adjoint: DVector<f64>,
    pub adjoint_report: SpdSolveReport,
    /// `−λ (w_i − w_j)ᵀ(s_i − s_j)`, scaled by `l_ij` for the non-squared variant.
    pub data_term: Vec<f64>,
    pub grad: Vec<f64>,
}

impl BilevelProblem {
    pub fn new(
        train: &[TaskData],
        val: &[TaskData],
        graph: &TaskGraph,
        hp: &HyperParams,
    ) -> Result<Self> {
        hp.validate()?;
        if train.len() != graph.n_tasks() || val.len() != graph.n_tasks() {
            return Err(Error::DimensionMismatch(format!(
                "graph over {} tasks, {} training and {} validation tasks",
                graph.n_tasks(),
                train.len(),
                val.len()
            )));
        }
        let train_sys = InnerSystem::new(train, hp.ridge, hp.solver)?;
        let val_designs = BlockDiagOperator::new(val.iter().map(|t| t.x.clone()).collect())?;
        if val_designs.block_cols() != train_sys.dim() {
            return Err(Error::DimensionMismatch(
                "training and validation feature counts differ".into(),
            ));
        }
        Ok(BilevelProblem {
            train: train_sys,
            val_designs,
            val_targets: val.iter().map(|t| t.y.clone()).collect(),
            pairs: graph.pairs(),
            hp: hp.clone(),
        })
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn n_edges(&self) -> usize {
        self.pairs.len()
    }

    pub fn train(&self) -> &InnerSystem {
        &self.train
    }

    fn check_edges(&self, edges: &[f64]) -> Result<()> {
        if edges.len() != self.pairs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} edge weights for {} edges",
                edges.len(),
                self.pairs.len()
            )));
        }
        if let Some(k) = edges.iter().position(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "edge {k} has invalid weight {}",
                edges[k]
            )));
        }
        Ok(())
    }

    /// Inner optimum of the active variant at `edges`.
    pub fn solve_inner(&self, edges: &[f64], warm: Option<&InnerState>) -> Result<InnerState> {
        self.check_edges(edges)?;
        let warm_v = warm.map(|w| &w.solution.stacked);
        match self.hp.variant {
            Variant::SqL2 => Ok(InnerState {
                edges: edges.to_vec(),
                solution: self
                    .train
                    .solve(&self.pairs, edges, self.hp.lambda, warm_v)?,
                reweights: None,
            }),
            Variant::L2 => {
                let sol = self.train.solve_l2(
                    &self.pairs,
                    edges,
                    self.hp.lambda,
                    &self.hp.l2_options(),
                    warm_v,
                )?;
                Ok(InnerState {
                    edges: edges.to_vec(),
                    solution: sol.inner,
                    reweights: Some(sol.reweights.l),
                })
            }
        }
    }

    /// Squared solve at `e ∘ l` with `l` held fixed.
    pub fn solve_frozen(&self, edges: &[f64], l: Option<&[f64]>) -> Result<InnerSolution> {
        self.check_edges(edges)?;
        let effective: Vec<f64> = match l {
            Some(l) => edges.iter().zip(l).map(|(e, l)| e * l).collect(),
            None => edges.to_vec(),
        };
        self.train
            .solve(&self.pairs, &effective, self.hp.lambda, None)
    }

    /// Full validation SSE (no ½ factor).
    pub fn val_sse(&self, models: &StackedModel) -> f64 {
        self.val_designs
            .blocks()
            .iter()
            .zip(&self.val_targets)
            .enumerate()
            .map(|(i, (x, y))| (x * models.task(i) - y).norm_squared())
            .sum()
    }

    pub fn train_sse(&self, models: &StackedModel) -> f64 {
        2.0 * (self.train.data_term(models)
            - 0.5 * self.train.ridge() * models.weights().norm_squared())
    }

    pub fn objective(&self, models: &StackedModel, edges: &[f64]) -> f64 {
        0.5 * self.val_sse(models) + edge_regularizer(edges, &self.hp)
    }

    pub fn objective_at(&self, state: &InnerState) -> f64 {
        self.objective(state.models(), &state.edges)
    }

    /// Closed-form hypergradient at a solved inner state.
    pub fn hypergradient(
        &self,
        state: &InnerState,
        warm_adjoint: Option<&DVector<f64>>,
    ) -> Result<HypergradWorkspace> {
        let models = state.models();
        let d = self.train.dim();
        let residuals: Vec<DVector<f64>> = self
            .val_designs
            .blocks()
            .iter()
            .zip(&self.val_targets)
            .enumerate()
            .map(|(i, (x, y))| x * models.task(i) - y)
            .collect();
        let c = self.val_designs.transpose_apply(&residuals);
        let system = SpdSystem::new(&state.solution.a, self.train.solver())?;
        let (adjoint, adjoint_report) = system.solve(&c, warm_adjoint)?;

        let lambda = self.hp.lambda;
        let v = &state.solution.stacked;
        let l = state.reweights.as_deref();
        let per_edge = |(k, &(i, j)): (usize, &(usize, usize))| -> f64 {
            let dw = v.rows(i * d, d) - v.rows(j * d, d);
            let ds = adjoint.rows(i * d, d) - adjoint.rows(j * d, d);
            let chain = l.map_or(1.0, |l| l[k]);
            -lambda * chain * dw.dot(&ds)
        };
        let data_term: Vec<f64> = crate::if_rayon!(
            self.pairs
                .par_iter()
                .enumerate()
                .with_min_len(MIN_PAR_LEN * 16)
                .map(per_edge)
                .collect(),
            self.pairs.iter().enumerate().map(per_edge).collect()
        );
        let grad = data_term
            .iter()
            .zip(&state.edges)
            .map(|(dt, &e)| dt + regularizer_gradient(e, &self.hp))
            .collect();
        Ok(HypergradWorkspace {
            c,
            adjoint,
            adjoint_report,
            data_term,
            grad,
        })
    }

    /// Finite-difference hypergradient: every coordinate re-solves the inner
    /// problem at `e ± h` (non-squared reweights frozen at their value at `e`).
    /// Coordinates closer than `h` to zero use a one-sided second-order
    /// stencil so no evaluation leaves the nonnegative orthant.
    pub fn fd_hypergradient(&self, edges: &[f64], h: f64) -> Result<Vec<f64>> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step h must be positive, got {h}"
            )));
        }
        self.check_edges(edges)?;
        let frozen = match self.hp.variant {
            Variant::SqL2 => None,
            Variant::L2 => self.solve_inner(edges, None)?.reweights,
        };
        let f = |e: &[f64]| -> Result<f64> {
            let sol = self.solve_frozen(e, frozen.as_deref())?;
            Ok(self.objective(&sol.models, e))
        };
        let coord = |k: usize| -> Result<f64> {
            let shifted = |delta: f64| {
                let mut e = edges.to_vec();
                e[k] += delta;
                e
            };
            if edges[k] >= h {
                Ok((f(&shifted(h))? - f(&shifted(-h))?) / (2.0 * h))
            } else {
                Ok((-3.0 * f(edges)? + 4.0 * f(&shifted(h))? - f(&shifted(2.0 * h))?) / (2.0 * h))
            }
        };
        let m = edges.len();
        crate::if_rayon!(
            (0..m).into_par_iter().map(coord).collect(),
            (0..m).map(coord).collect()
        )
    }
}

/// `d_e f` at `edges` for the squared variant (or the non-squared variant
/// with frozen reweights when `hp.variant` says so).
pub fn hypergradient(
    edges: &[f64],
    graph: &TaskGraph,
    train_data: &[TaskData],
    val_data: &[TaskData],
    hp: &HyperParams,
) -> Result<Vec<f64>> {
    let problem = BilevelProblem::new(train_data, val_data, graph, hp)?;
    let state = problem.solve_inner(edges, None)?;
    Ok(problem.hypergradient(&state, None)?.grad)
}

/// Central-difference oracle for [`hypergradient`].
pub fn fd_hypergradient(
    edges: &[f64],
    graph: &TaskGraph,
    train_data: &[TaskData],
    val_data: &[TaskData],
    hp: &HyperParams,
    h: f64,
) -> Result<Vec<f64>> {
    BilevelProblem::new(train_data, val_data, graph, hp)?.fd_hypergradient(edges, h)
}

/// Projected descent step `clamp(e − ν g, 0, 1)`.
pub fn update_edges(edges: &[f64], grad: &[f64], nu: f64) -> Vec<f64> {
    assert_eq!(edges.len(), grad.len(), "update_edges: length mismatch");
    edges
        .iter()
        .zip(grad)
        .map(|(e, g)| (e - nu * g).clamp(0.0, 1.0))
        .collect()
}

/// How `v` is scaled in the closed-form edge system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeScaling {
    /// `v = C/η − XᵀX u/λ`.
    #[default]
    Normalized,
    /// `v = (λ/η) C − XᵀX u`, i.e. the system before dividing through by λ.
    Unnormalized,
}

/// Pieces of the closed-form edge solution.
#[derive(Debug, Clone)]
pub struct ClosedFormEdges {
    pub edges: Vec<f64>,
    /// `nd × m`; column `k` carries `z_k = u_i − u_j` in block `i` and `−z_k` in block `j`.
    pub u_matrix: DMatrix<f64>,
    pub v: DVector<f64>,
    /// Minimum-norm least-squares solution of `M u = 1_m`.
    pub u: DVector<f64>,
    pub residual_norm: f64,
}

/// Edge weights that zero the hypergradient when only the ℓ1 regularizer is
/// active, as the box-constrained least-squares solution of `U e = v`. The
/// models and `C` are taken at the graph's current weights.
pub fn closed_form_edges(
    graph: &TaskGraph,
    train_data: &[TaskData],
    val_data: &[TaskData],
    hp: &HyperParams,
    scaling: EdgeScaling,
) -> Result<ClosedFormEdges> {
    if !(hp.eta > 0.0) || !(hp.lambda > 0.0) {
        return Err(Error::InvalidArgument(
            "closed-form edges need eta > 0 and lambda > 0".into(),
        ));
    }
    if hp.xi != 0.0 || hp.gamma != 0.0 {
        return Err(Error::InvalidArgument(
            "closed-form edges need xi = 0 and gamma = 0".into(),
        ));
    }
    let sq = HyperParams {
        variant: Variant::SqL2,
        ..hp.clone()
    };
    let problem = BilevelProblem::new(train_data, val_data, graph, &sq)?;
    let state = problem.solve_inner(&graph.weights(), None)?;
    let ws = problem.hypergradient(&state, None)?;

    let n = graph.n_tasks();
    let d = problem.train.dim();
    let nd = n * d;
    let m = graph.n_edges();
    let v_stacked = &state.solution.stacked;

    guard::record(m, nd);
    let mut mmat = DMatrix::zeros(m, nd);
    for (k, &(i, j)) in problem.pairs.iter().enumerate() {
        let dw = v_stacked.rows(i * d, d) - v_stacked.rows(j * d, d);
        for a in 0..d {
            mmat[(k, i * d + a)] = dw[a];
            mmat[(k, j * d + a)] = -dw[a];
        }
    }
    let svd = mmat.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(Error::Degenerate(
            "all connected task models coincide, M has rank 0".into(),
        ));
    }
    let cutoff = smax * (m.max(nd) as f64) * f64::EPSILON;
    let u = svd
        .solve(&DVector::from_element(m, 1.0), cutoff)
        .map_err(|e| Error::Degenerate(e.to_string()))?;

    let mut xtx_u = DVector::zeros(nd);
    for i in 0..n {
        let g = problem.train.designs().gram(i);
        let ui = u.rows(i * d, d);
        let mut out = &g * ui;
        out.axpy(problem.train.ridge(), &ui, 1.0);
        xtx_u.rows_mut(i * d, d).copy_from(&out);
    }
    let v = match scaling {
        EdgeScaling::Normalized => &ws.c / hp.eta - xtx_u / hp.lambda,
        EdgeScaling::Unnormalized => &ws.c * (hp.lambda / hp.eta) - xtx_u,
    };

    guard::record(nd, m);
    let mut umat = DMatrix::zeros(nd, m);
    for (k, &(i, j)) in problem.pairs.iter().enumerate() {
        let z = u.rows(i * d, d) - u.rows(j * d, d);
        for a in 0..d {
            umat[(i * d + a, k)] = z[a];
            umat[(j * d + a, k)] = -z[a];
        }
    }
    let e = bounded_least_squares(&umat, &v, 0.0, 1.0)?;
    let residual_norm = (&umat * &e - &v).norm();
    Ok(ClosedFormEdges {
        edges: e.iter().copied().collect(),
        u_matrix: umat,
        v,
        u,
        residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn only(gamma: f64, xi: f64, eta: f64) -> HyperParams {
        HyperParams {
            xi,
            eta,
            gamma,
            ..HyperParams::default()
        }
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[1.0]), 1.0);
        assert!((entropy(&[0.5]) - 0.5 * (1.0 + 2f64.ln())).abs() < 1e-15);
        assert_eq!(entropy(&[0.0]), 0.0);
    }

    #[test]
    fn objective_regularizer_only() {
        let m = StackedModel::new(DMatrix::zeros(1, 1)).unwrap();
        let val = [TaskData::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap()];
        assert_eq!(
            outer_objective(&m, &[1.0], &val, &only(1.0, 0.0, 0.0)).unwrap(),
            1.0
        );
        let half = outer_objective(&m, &[0.5], &val, &only(1.0, 0.0, 0.0)).unwrap();
        assert!((half - 0.846_573_590_279_972_7).abs() < 1e-12);
        let val = [TaskData::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
        )
        .unwrap()];
        assert_eq!(
            outer_objective(&m, &[0.0], &val, &only(1.0, 1.0, 1.0)).unwrap(),
            2.0
        );
    }

    #[test]
    fn update_edges_clamps() {
        assert_eq!(update_edges(&[0.5], &[0.0], 0.1), vec![0.5]);
        assert_eq!(update_edges(&[0.5], &[10.0], 0.1), vec![0.0]);
        assert_eq!(update_edges(&[0.5], &[-10.0], 0.1), vec![1.0]);
    }

    #[test]
    fn regularizer_gradient_at_zero_drops_entropy() {
        let hp = only(2.0, 0.0, 0.0);
        assert_eq!(regularizer_gradient(0.0, &hp), 0.0);
        assert!(regularizer_gradient(1e-3, &hp) > 0.0);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("l2".parse::<Variant>().unwrap(), Variant::L2);
        assert!("l3".parse::<Variant>().is_err());
        assert_eq!(serde_json::to_string(&Variant::SqL2).unwrap(), "\"sq_l2\"");
    }

    #[test]
    fn closed_form_preconditions() {
        let t = TaskData::new(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let data = vec![t.clone(), t];
        let g = TaskGraph::new(2, [(0, 1, 1.0)]).unwrap();
        for hp in [
            only(0.0, 0.0, 0.0),
            only(1.0, 0.0, 1.0),
            only(0.0, 1.0, 1.0),
        ] {
            assert!(matches!(
                closed_form_edges(&g, &data, &data, &hp, EdgeScaling::Normalized),
                Err(Error::InvalidArgument(_))
            ));
        }
        // identical zero models: M has rank 0
        assert!(matches!(
            closed_form_edges(
                &g,
                &data,
                &data,
                &only(0.0, 0.0, 1.0),
                EdgeScaling::Normalized
            ),
            Err(Error::Degenerate(_))
        ));
    }
}
