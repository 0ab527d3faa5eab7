//! The lower-level problem: all task models for fixed edge weights.
//!
//! The squared variant minimizes
//! `½ Σ‖X_i w_i − y_i‖² + ½ λ tr(Vᵀ L_e V)`, whose stationarity condition is
//! `(λ L_e ⊗ I_d + XᵀX) V = XᵀY`. The non-squared variant replaces the
//! Dirichlet energy by `Σ e_ij ‖w_i − w_j‖` and is solved by alternating
//! closed-form edge reweights with squared solves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::IncidenceView;
use crate::graph::TaskGraph;
use crate::linalg::{
    assemble_a, exact_gram, laplacian_from_edges, BlockDiagOperator, Preconditioner, SolverOptions,
    SparseMatrix, SpdSolveReport, SpdSystem,
};
#[cfg(feature = "parallel")]
use crate::par::*;

/// Design matrix and targets of one regression task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TaskData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("task has no samples".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} design rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("task data".into()));
        }
        Ok(TaskData { x, y })
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> TaskData {
        TaskData {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
        }
    }

    pub fn sse(&self, w: &DVector<f64>) -> f64 {
        (&self.x * w - &self.y).norm_squared()
    }
}

/// Checks that a task list is non-empty and shares one feature count.
pub(crate) fn common_dim(data: &[TaskData]) -> Result<usize> {
    let d = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("no tasks given".into()))?
        .n_features();
    if let Some(i) = data.iter().position(|t| t.n_features() != d) {
        return Err(Error::DimensionMismatch(format!(
            "task {i} has {} features, expected {d}",
            data[i].n_features()
        )));
    }
    Ok(d)
}

/// The `n` task weight vectors; row `i` is `w_iᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedModel {
    weights: DMatrix<f64>,
}

impl StackedModel {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(StackedModel { weights })
    }

    /// From the stacked vector `V = [w_1; …; w_n]`.
    pub fn from_stacked(v: &DVector<f64>, n_tasks: usize, d: usize) -> Result<Self> {
        if v.len() != n_tasks * d {
            return Err(Error::DimensionMismatch(format!(
                "stacked vector of length {} for {n_tasks} tasks of dimension {d}",
                v.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n_tasks, d, v.as_slice()))
    }

    pub fn n_tasks(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn task(&self, i: usize) -> DVector<f64> {
        self.weights.row(i).transpose()
    }

    pub fn to_stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.weights.len(),
            self.weights
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
        )
    }

    /// Per-task sum of squared residuals.
    pub fn sse(&self, data: &[TaskData]) -> Result<Vec<f64>> {
        self.check_data(data)?;
        Ok(data
            .iter()
            .enumerate()
            .map(|(i, t)| t.sse(&self.task(i)))
            .collect())
    }

    pub(crate) fn check_data(&self, data: &[TaskData]) -> Result<()> {
        if data.len() != self.n_tasks() {
            return Err(Error::DimensionMismatch(format!(
                "{} tasks of data for {} models",
                data.len(),
                self.n_tasks()
            )));
        }
        if let Some(i) = data.iter().position(|t| t.n_features() != self.dim()) {
            return Err(Error::DimensionMismatch(format!(
                "task {i} has {} features, models have {}",
                data[i].n_features(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl Serialize for StackedModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self
            .weights
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for StackedModel {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rows: Vec<Vec<f64>> = Vec::deserialize(de)?;
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(D::Error::custom("model rows have different lengths"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        StackedModel::new(DMatrix::from_row_slice(n, d, &flat)).map_err(D::Error::custom)
    }
}

/// Multiplicative edge reweights `l_ij = 0.5 / max(‖w_i − w_j‖, eps_guard)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeReweights {
    pub l: Vec<f64>,
}

/// Independent least squares per task: `argmin ‖X_i w − y_i‖² + ridge ‖w‖²`.
pub fn ols_per_task(data: &[TaskData], ridge: f64) -> Result<StackedModel> {
    let d = common_dim(data)?;
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    let solve_one = |(i, t): (usize, &TaskData)| -> Result<DVector<f64>> {
        if ridge == 0.0 {
            let svd = t.x.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let cutoff = smax * (t.n_samples().max(d) as f64) * f64::EPSILON;
            let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
            if rank < d || smax == 0.0 {
                return Err(Error::RankDeficient { task: i });
            }
            svd.solve(&t.y, cutoff)
                .map_err(|e| Error::Degenerate(e.to_string()))
        } else {
            let mut g = exact_gram(&t.x);
            for a in 0..d {
                g[(a, a)] += ridge;
            }
            let rhs = t.x.tr_mul(&t.y);
            crate::linalg::dense_spd_solve(g, &rhs).map_err(|_| Error::RankDeficient { task: i })
        }
    };
    let rows: Vec<DVector<f64>> = crate::if_rayon!(
        data.par_iter()
            .enumerate()
            .with_min_len(MIN_PAR_LEN)
            .map(solve_one)
            .collect::<Result<_>>()?,
        data.iter()
            .enumerate()
            .map(solve_one)
            .collect::<Result<_>>()?
    );
    let mut w = DMatrix::zeros(data.len(), d);
    for (i, r) in rows.iter().enumerate() {
        w.set_row(i, &r.transpose());
    }
    StackedModel::new(w)
}

/// Training-side pieces of the inner problem that do not depend on the edges.
#[derive(Debug, Clone)]
pub struct InnerSystem {
    designs: BlockDiagOperator,
    xty: DVector<f64>,
    targets: Vec<DVector<f64>>,
    ridge: f64,
    solver: SolverOptions,
}

/// Output of one squared inner solve.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub models: StackedModel,
    pub stacked: DVector<f64>,
    /// `A = λ L ⊗ I_d + XᵀX (+ ridge I)` at the weights used.
    pub a: SparseMatrix,
    pub report: SpdSolveReport,
}

impl InnerSystem {
    pub fn new(data: &[TaskData], ridge: f64, solver: SolverOptions) -> Result<Self> {
        common_dim(data)?;
        if !(ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ridge must be >= 0, got {ridge}"
            )));
        }
        let designs = BlockDiagOperator::new(data.iter().map(|t| t.x.clone()).collect())?;
        let targets: Vec<DVector<f64>> = data.iter().map(|t| t.y.clone()).collect();
        let xty = designs.transpose_apply(&targets);
        let d = designs.block_cols();
        let solver = SolverOptions {
            preconditioner: match solver.preconditioner {
                Preconditioner::TaskBlocks => Preconditioner::BlockJacobi(d.max(1)),
                p => p,
            },
            ..solver
        };
        Ok(InnerSystem {
            designs,
            xty,
            targets,
            ridge,
            solver,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.designs.n_blocks()
    }

    pub fn dim(&self) -> usize {
        self.designs.block_cols()
    }

    pub fn designs(&self) -> &BlockDiagOperator {
        &self.designs
    }

    pub fn xty(&self) -> &DVector<f64> {
        &self.xty
    }

    pub fn solver(&self) -> &SolverOptions {
        &self.solver
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn assemble(
        &self,
        pairs: &[(usize, usize)],
        weights: &[f64],
        lambda: f64,
    ) -> Result<SparseMatrix> {
        let inc = IncidenceView::new(self.n_tasks(), pairs.to_vec());
        let lap = laplacian_from_edges(&inc.matrix, weights)?;
        assemble_a(&lap, &self.designs, lambda, self.ridge)
    }

    /// Solves `A V = XᵀY` for arbitrary nonnegative edge weights (not limited
    /// to `[0, 1]`, so reweighted edges can be passed directly).
    pub fn solve(
        &self,
        pairs: &[(usize, usize)],
        weights: &[f64],
        lambda: f64,
        warm: Option<&DVector<f64>>,
    ) -> Result<InnerSolution> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if let Some(k) = weights.iter().position(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "edge weight {k} is negative or NaN ({})",
                weights[k]
            )));
        }
        let a = self.assemble(pairs, weights, lambda)?;
        let (stacked, report) = SpdSystem::new(&a, &self.solver)?.solve(&self.xty, warm)?;
        let models = StackedModel::from_stacked(&stacked, self.n_tasks(), self.dim())?;
        Ok(InnerSolution {
            models,
            stacked,
            a,
            report,
        })
    }

    /// `½ Σ‖X_i w_i − y_i‖² + ½ ridge ‖V‖²`.
    pub fn data_term(&self, models: &StackedModel) -> f64 {
        let sse: f64 = self
            .designs
            .blocks()
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(i, (x, y))| (x * models.task(i) - y).norm_squared())
            .sum();
        0.5 * sse + 0.5 * self.ridge * models.weights().norm_squared()
    }

    /// Squared-variant inner objective `g(V, e)`.
    pub fn objective_sq(&self, models: &StackedModel, graph: &TaskGraph, lambda: f64) -> f64 {
        self.data_term(models) + 0.5 * lambda * pairwise_energy(models, graph.edges())
    }

    /// Non-squared inner objective `½ SSE + ½ λ Σ e_ij ‖w_i − w_j‖`.
    pub fn objective_l2(
        &self,
        models: &StackedModel,
        pairs: &[(usize, usize)],
        weights: &[f64],
        lambda: f64,
    ) -> f64 {
        let penalty: f64 = pairs
            .iter()
            .zip(weights)
            .map(|(&(i, j), &e)| e * (models.task(i) - models.task(j)).norm())
            .sum();
        self.data_term(models) + 0.5 * lambda * penalty
    }

    /// Alternating solve of the non-squared variant; see [`solve_inner_l2`].
    pub fn solve_l2(
        &self,
        pairs: &[(usize, usize)],
        weights: &[f64],
        lambda: f64,
        opts: &L2Options,
        warm: Option<&DVector<f64>>,
    ) -> Result<L2Solution> {
        let m = pairs.len();
        let mut sol = self.solve(pairs, weights, lambda, warm)?;
        let mut objectives = vec![self.objective_l2(&sol.models, pairs, weights, lambda)];
        let mut l = vec![1.0; m];
        let mut rounds = 0;
        if lambda == 0.0 || m == 0 {
            return Ok(L2Solution {
                inner: sol,
                reweights: EdgeReweights { l },
                objectives,
                rounds,
            });
        }
        while rounds < opts.max_rounds {
            l = reweight_values(&sol.models, pairs, opts.eps_guard);
            let effective: Vec<f64> = weights.iter().zip(&l).map(|(e, l)| e * l).collect();
            let next = self.solve(pairs, &effective, lambda, Some(&sol.stacked))?;
            rounds += 1;
            let change =
                (&next.stacked - &sol.stacked).norm() / sol.stacked.norm().max(f64::MIN_POSITIVE);
            objectives.push(self.objective_l2(&next.models, pairs, weights, lambda));
            sol = next;
            if change < opts.tol {
                break;
            }
        }
        Ok(L2Solution {
            inner: sol,
            reweights: EdgeReweights { l },
            objectives,
            rounds,
        })
    }
}

/// Stopping rule and guard for the non-squared alternation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Options {
    pub eps_guard: f64,
    pub tol: f64,
    pub max_rounds: usize,
}

impl Default for L2Options {
    fn default() -> Self {
        L2Options {
            eps_guard: 1e-8,
            tol: 1e-5,
            max_rounds: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct L2Solution {
    /// Squared solve at the effective weights `e ∘ l`; its models are the
    /// returned models.
    pub inner: InnerSolution,
    pub reweights: EdgeReweights,
    /// Non-squared objective after the initial solve and after every round.
    pub objectives: Vec<f64>,
    pub rounds: usize,
}

impl L2Solution {
    pub fn models(&self) -> &StackedModel {
        &self.inner.models
    }
}

fn check_graph(data: &[TaskData], graph: &TaskGraph) -> Result<()> {
    if graph.n_tasks() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "graph over {} tasks but {} tasks of data",
            graph.n_tasks(),
            data.len()
        )));
    }
    Ok(())
}

/// Exact minimizer of the squared inner objective on `graph`.
pub fn solve_inner_sq(data: &[TaskData], graph: &TaskGraph, lambda: f64) -> Result<StackedModel> {
    check_graph(data, graph)?;
    let sys = InnerSystem::new(
        data,
        0.0,
        SolverOptions {
            preconditioner: Preconditioner::TaskBlocks,
            ..SolverOptions::default()
        },
    )?;
    Ok(sys
        .solve(&graph.pairs(), &graph.weights(), lambda, None)?
        .models)
}

/// Non-squared inner problem by alternating reweights and squared solves,
/// until the relative change of `V` drops below `tol` or `max_rounds`.
pub fn solve_inner_l2(
    data: &[TaskData],
    graph: &TaskGraph,
    lambda: f64,
    eps_guard: f64,
    tol: f64,
    max_rounds: usize,
) -> Result<(StackedModel, EdgeReweights)> {
    let sol = solve_inner_l2_traced(
        data,
        graph,
        lambda,
        &L2Options {
            eps_guard,
            tol,
            max_rounds,
        },
    )?;
    Ok((sol.inner.models, sol.reweights))
}

/// As [`solve_inner_l2`], keeping the per-round objective history.
pub fn solve_inner_l2_traced(
    data: &[TaskData],
    graph: &TaskGraph,
    lambda: f64,
    opts: &L2Options,
) -> Result<L2Solution> {
    check_graph(data, graph)?;
    if !(opts.eps_guard > 0.0) {
        return Err(Error::InvalidArgument("eps_guard must be positive".into()));
    }
    let sys = InnerSystem::new(
        data,
        0.0,
        SolverOptions {
            preconditioner: Preconditioner::TaskBlocks,
            ..SolverOptions::default()
        },
    )?;
    sys.solve_l2(&graph.pairs(), &graph.weights(), lambda, opts, None)
}

/// Both sides of `tr(Vᵀ L_e V) = Σ e_ij ‖w_i − w_j‖²`, computed independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletEnergy {
    pub trace_form: f64,
    pub pairwise_form: f64,
}

impl DirichletEnergy {
    pub fn value(&self) -> f64 {
        self.pairwise_form
    }

    pub fn relative_gap(&self) -> f64 {
        let scale = self.trace_form.abs().max(self.pairwise_form.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.trace_form - self.pairwise_form).abs() / scale
        }
    }
}

pub fn dirichlet_energy(models: &StackedModel, graph: &TaskGraph) -> Result<DirichletEnergy> {
    if graph.n_tasks() != models.n_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "graph over {} tasks, {} models",
            graph.n_tasks(),
            models.n_tasks()
        )));
    }
    let lap = graph.laplacian();
    let w = models.weights();
    let trace_form: f64 = w
        .column_iter()
        .map(|col| {
            let col: Vec<f64> = col.iter().copied().collect();
            let lc = lap.mul_vec(&col);
            col.iter().zip(&lc).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();
    let pairwise_form = pairwise_energy(models, graph.edges());

    // rounding in the trace form scales with the magnitudes, not the result
    let scale: f64 = graph
        .edges()
        .iter()
        .map(|&(i, j, e)| e * (models.task(i).norm_squared() + models.task(j).norm_squared()))
        .sum();
    debug_assert!(
        (trace_form - pairwise_form).abs() <= 1e-10 * pairwise_form.abs() + 1e-12 * scale,
        "Dirichlet identity violated: {trace_form} vs {pairwise_form}"
    );
    Ok(DirichletEnergy {
        trace_form,
        pairwise_form,
    })
}

fn pairwise_energy(models: &StackedModel, edges: &[(usize, usize, f64)]) -> f64 {
    edges
        .iter()
        .map(|&(i, j, e)| e * (models.task(i) - models.task(j)).norm_squared())
        .sum()
}

pub(crate) fn reweight_values(
    models: &StackedModel,
    pairs: &[(usize, usize)],
    eps_guard: f64,
) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(i, j)| 0.5 / (models.task(i) - models.task(j)).norm().max(eps_guard))
        .collect()
}

pub fn reweights(models: &StackedModel, graph: &TaskGraph, eps_guard: f64) -> EdgeReweights {
    EdgeReweights {
        l: reweight_values(models, &graph.pairs(), eps_guard),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(rows: &[&[f64]], y: &[f64]) -> TaskData {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TaskData::new(
            DMatrix::from_row_slice(rows.len(), d, &flat),
            DVector::from_row_slice(y),
        )
        .unwrap()
    }

    #[test]
    fn task_data_validation() {
        assert!(TaskData::new(DMatrix::zeros(0, 2), DVector::zeros(0)).is_err());
        assert!(TaskData::new(DMatrix::zeros(2, 2), DVector::zeros(3)).is_err());
        assert!(TaskData::new(DMatrix::from_element(1, 1, f64::NAN), DVector::zeros(1)).is_err());
    }

    #[test]
    fn ols_identity_design() {
        let t = task(&[&[1.0, 0.0], &[0.0, 1.0]], &[3.0, -2.0]);
        let m = ols_per_task(&[t], 0.0).unwrap();
        assert!((m.task(0) - DVector::from_vec(vec![3.0, -2.0])).amax() < 1e-14);
    }

    #[test]
    fn ols_rank_deficient_needs_ridge() {
        let t = task(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            ols_per_task(std::slice::from_ref(&t), 0.0),
            Err(Error::RankDeficient { task: 0 })
        ));
        assert!(ols_per_task(&[t], 1e-3).is_ok());
    }

    #[test]
    fn stacked_round_trip() {
        let m =
            StackedModel::new(DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.])).unwrap();
        let v = m.to_stacked();
        assert_eq!(v.as_slice(), &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(StackedModel::from_stacked(&v, 2, 3).unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, "[[1.0,2.0,3.0],[4.0,5.0,6.0]]");
        assert_eq!(serde_json::from_str::<StackedModel>(&json).unwrap(), m);
    }

    #[test]
    fn dirichlet_small_cases() {
        let m = StackedModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let g = TaskGraph::new(2, [(0, 1, 1.0)]).unwrap();
        // e = 2 is outside a TaskGraph's [0, 1]; scale the unit-weight energy
        let en = dirichlet_energy(&m, &g).unwrap();
        assert_eq!(2.0 * en.value(), 4.0);
        assert_eq!(en.trace_form, en.pairwise_form);

        let same = StackedModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0])).unwrap();
        assert_eq!(dirichlet_energy(&same, &g).unwrap().value(), 0.0);
    }

    #[test]
    fn reweight_formula_and_guard() {
        let m = StackedModel::new(DMatrix::from_row_slice(3, 1, &[0.0, 2.0, 2.0])).unwrap();
        let g = TaskGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let l = reweights(&m, &g, 1e-8).l;
        assert_eq!(l[0], 0.25);
        assert_eq!(l[1], 0.5 / 1e-8);
    }

    #[test]
    fn single_task_l2_is_ols() {
        let t = task(&[&[1.0, 0.5], &[0.0, 1.0], &[2.0, 1.0]], &[1.0, 2.0, 0.5]);
        let ols = ols_per_task(std::slice::from_ref(&t), 0.0).unwrap();
        let (m, _) = solve_inner_l2(&[t], &TaskGraph::empty(1), 5.0, 1e-8, 1e-5, 10).unwrap();
        assert!((m.weights() - ols.weights()).amax() < 1e-10);
    }

    #[test]
    fn graph_size_must_match() {
        let t = task(&[&[1.0], &[2.0]], &[1.0, 2.0]);
        assert!(solve_inner_sq(&[t], &TaskGraph::empty(2), 1.0).is_err());
    }
}
