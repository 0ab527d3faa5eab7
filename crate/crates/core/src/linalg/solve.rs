use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::guard;
use super::sparse::SparseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpdSolveReport {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "block")]
pub enum Preconditioner {
    None,
    Jacobi,
    /// Exact inverse of the diagonal blocks of the given size.
    BlockJacobi(usize),
    /// Block-Jacobi with one block per task model; the multi-task solvers
    /// resolve this to `BlockJacobi(d)`, elsewhere it behaves as `Jacobi`.
    TaskBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative residual target `‖Ax − b‖ ≤ tol ‖b‖`.
    pub tol: f64,
    /// `None` means `10 · n`.
    pub max_iter: Option<usize>,
    /// Systems of at most this size are factorized directly.
    pub dense_threshold: usize,
    /// When the iterative path stalls on a system of at most this size, it is
    /// retried with a dense factorization instead of failing.
    pub dense_fallback: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: None,
            dense_threshold: 200,
            dense_fallback: 1000,
            preconditioner: Preconditioner::Jacobi,
        }
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(
    a: &SparseMatrix,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, SpdSolveReport)> {
    let opts = SolverOptions {
        tol,
        max_iter: Some(max_iter),
        ..SolverOptions::default()
    };
    SpdSystem::new(a, &opts)?.solve(rhs, None)
}

/// A symmetric positive definite system prepared for repeated solves.
pub struct SpdSystem<'a> {
    a: &'a SparseMatrix,
    tol: f64,
    max_iter: usize,
    dense_fallback: usize,
    kind: SystemKind,
}

enum SystemKind {
    Dense(Box<Cholesky<f64, Dyn>>),
    Iterative(Precond),
}

enum Precond {
    Identity,
    Diagonal(Vec<f64>),
    Blocks {
        size: usize,
        factors: Vec<Cholesky<f64, Dyn>>,
    },
}

impl<'a> SpdSystem<'a> {
    pub fn new(a: &'a SparseMatrix, opts: &SolverOptions) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::DimensionMismatch(format!(
                "system matrix is {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if !a.is_symmetric() {
            let (row, col) = a
                .triplets()
                .find(|&(r, c, v)| a.get(c, r) != v)
                .map(|(r, c, _)| (r, c))
                .unwrap_or((0, 0));
            return Err(Error::Asymmetric { row, col });
        }
        if !(opts.tol > 0.0) {
            return Err(Error::InvalidArgument(
                "solver tolerance must be positive".into(),
            ));
        }
        let n = a.rows();
        let max_iter = opts.max_iter.unwrap_or(10 * n.max(1));
        let kind = if n <= opts.dense_threshold {
            let chol = Cholesky::new(a.to_dense()).ok_or(Error::NotPositiveDefinite)?;
            SystemKind::Dense(Box::new(chol))
        } else {
            SystemKind::Iterative(Precond::build(a, opts.preconditioner)?)
        };
        Ok(SpdSystem {
            a,
            tol: opts.tol,
            max_iter,
            dense_fallback: opts.dense_fallback,
            kind,
        })
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.kind, SystemKind::Dense(_))
    }

    /// Solves for one right-hand side; `x0` warm-starts the iterative path.
    pub fn solve(
        &self,
        rhs: &DVector<f64>,
        x0: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, SpdSolveReport)> {
        if rhs.len() != self.a.rows() {
            return Err(Error::DimensionMismatch(format!(
                "rhs has length {} for a {}-row system",
                rhs.len(),
                self.a.rows()
            )));
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("right-hand side".into()));
        }
        match &self.kind {
            SystemKind::Dense(chol) => self.solve_direct(chol, rhs),
            SystemKind::Iterative(pre) => match self.solve_pcg(pre, rhs, x0) {
                Err(Error::NotConverged { residual, .. })
                    if self.a.rows() <= self.dense_fallback =>
                {
                    log::warn!(
                        "conjugate gradient stalled at relative residual {residual:.2e}; \
                         refactorizing the {}-row system densely",
                        self.a.rows()
                    );
                    let chol =
                        Cholesky::new(self.a.to_dense()).ok_or(Error::NotPositiveDefinite)?;
                    self.solve_direct(&chol, rhs)
                }
                other => other,
            },
        }
    }

    fn residual(&self, x: &DVector<f64>, rhs: &DVector<f64>) -> DVector<f64> {
        rhs - self.a.mul_dvec(x)
    }

    fn solve_direct(
        &self,
        chol: &Cholesky<f64, Dyn>,
        rhs: &DVector<f64>,
    ) -> Result<(DVector<f64>, SpdSolveReport)> {
        let bnorm = rhs.norm();
        let mut x = chol.solve(rhs);
        let mut r = self.residual(&x, rhs);
        let mut refinements = 0;
        // a couple of refinement sweeps recover accuracy on poorly scaled systems
        while r.norm() > self.tol * bnorm && refinements < 3 {
            x += chol.solve(&r);
            r = self.residual(&x, rhs);
            refinements += 1;
        }
        let residual_norm = r.norm();
        // a factorization is backward stable, so a residual at the rounding
        // floor of an ill-conditioned system still counts as solved
        let floor = 64.0
            * f64::EPSILON
            * (self.a.norm_inf() * x.amax() + rhs.amax())
            * (rhs.len() as f64).sqrt();
        let report = SpdSolveReport {
            iterations: refinements,
            residual_norm,
            converged: residual_norm <= (self.tol * bnorm).max(floor),
        };
        if !report.converged {
            return Err(Error::NotConverged {
                iterations: refinements,
                residual: residual_norm / bnorm.max(f64::MIN_POSITIVE),
                tol: self.tol,
            });
        }
        Ok((x, report))
    }

    fn solve_pcg(
        &self,
        pre: &Precond,
        rhs: &DVector<f64>,
        x0: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, SpdSolveReport)> {
        let n = rhs.len();
        let bnorm = rhs.norm();
        if bnorm == 0.0 {
            return Ok((
                DVector::zeros(n),
                SpdSolveReport {
                    iterations: 0,
                    residual_norm: 0.0,
                    converged: true,
                },
            ));
        }
        let target = self.tol * bnorm;

        let mut x = match x0 {
            Some(x0) if x0.len() == n => x0.clone(),
            _ => DVector::zeros(n),
        };
        let mut r = self.residual(&x, rhs);
        let mut z = pre.apply(&r);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        let mut ap = DVector::zeros(n);
        let mut iterations = 0;

        while r.norm() > target && iterations < self.max_iter {
            self.a.mul_vec_into(p.as_slice(), ap.as_mut_slice());
            let pap = p.dot(&ap);
            if !(pap > 0.0) {
                return Err(Error::NotPositiveDefinite);
            }
            let alpha = rz / pap;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            iterations += 1;
            // refresh the recursive residual periodically to limit drift
            if iterations % 50 == 0 {
                r = self.residual(&x, rhs);
            }
            z = pre.apply(&r);
            let rz_next = r.dot(&z);
            let beta = rz_next / rz;
            rz = rz_next;
            p.axpy(1.0, &z, beta);
        }

        let residual_norm = self.residual(&x, rhs).norm();
        let report = SpdSolveReport {
            iterations,
            residual_norm,
            converged: residual_norm <= target,
        };
        if !report.converged {
            return Err(Error::NotConverged {
                iterations,
                residual: residual_norm / bnorm,
                tol: self.tol,
            });
        }
        Ok((x, report))
    }
}

impl Precond {
    fn build(a: &SparseMatrix, kind: Preconditioner) -> Result<Self> {
        match kind {
            Preconditioner::None => Ok(Precond::Identity),
            Preconditioner::Jacobi | Preconditioner::TaskBlocks => {
                let diag = a.diagonal();
                if diag.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::NotPositiveDefinite);
                }
                Ok(Precond::Diagonal(
                    diag.into_iter().map(|v| 1.0 / v).collect(),
                ))
            }
            Preconditioner::BlockJacobi(size) => {
                let n = a.rows();
                if size == 0 || !n.is_multiple_of(size) {
                    return Err(Error::InvalidArgument(format!(
                        "block size {size} does not divide system size {n}"
                    )));
                }
                let mut factors = Vec::with_capacity(n / size);
                for blk in 0..n / size {
                    let base = blk * size;
                    let mut m = DMatrix::zeros(size, size);
                    for r in 0..size {
                        for (c, v) in a.row(base + r) {
                            if (base..base + size).contains(&c) {
                                m[(r, c - base)] = v;
                            }
                        }
                    }
                    factors.push(Cholesky::new(m).ok_or(Error::NotPositiveDefinite)?);
                }
                Ok(Precond::Blocks { size, factors })
            }
        }
    }

    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Precond::Identity => r.clone(),
            Precond::Diagonal(inv) => {
                DVector::from_iterator(r.len(), r.iter().zip(inv).map(|(a, b)| a * b))
            }
            Precond::Blocks { size, factors } => {
                let mut out = DVector::zeros(r.len());
                for (blk, f) in factors.iter().enumerate() {
                    let seg = r.rows(blk * size, *size).into_owned();
                    out.rows_mut(blk * size, *size).copy_from(&f.solve(&seg));
                }
                out
            }
        }
    }
}

/// Dense symmetric solve used by small oracles and least-squares helpers.
pub(crate) fn dense_spd_solve(m: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    guard::record(m.nrows(), m.ncols());
    let chol = Cholesky::new(m).ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.solve(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_matrix(values: &[f64]) -> SparseMatrix {
        let t = values.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        SparseMatrix::from_triplets(values.len(), values.len(), t)
            .unwrap()
            .into_symmetric()
            .unwrap()
    }

    fn laplacian_path(n: usize, shift: f64) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            let deg = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
            t.push((i, i, deg + shift));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, n, t)
            .unwrap()
            .into_symmetric()
            .unwrap()
    }

    #[test]
    fn identity_and_scaled_identity() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let (x, rep) = spd_solve(&SparseMatrix::identity(3), &b, 1e-12, 10).unwrap();
        assert!((x - &b).amax() < 1e-14);
        assert!(rep.converged);
        let (x, _) = spd_solve(&diag_matrix(&[2.0, 2.0, 2.0]), &b, 1e-12, 10).unwrap();
        assert!((x - b / 2.0).amax() < 1e-14);
    }

    #[test]
    fn iterative_path_matches_direct() {
        let a = laplacian_path(300, 0.05);
        let b = DVector::from_fn(300, |i, _| ((i * 7) % 11) as f64 - 5.0);
        for pre in [
            Preconditioner::None,
            Preconditioner::Jacobi,
            Preconditioner::BlockJacobi(3),
        ] {
            let opts = SolverOptions {
                preconditioner: pre,
                max_iter: Some(3000),
                ..SolverOptions::default()
            };
            let sys = SpdSystem::new(&a, &opts).unwrap();
            assert!(!sys.is_direct());
            let (x, rep) = sys.solve(&b, None).unwrap();
            assert!(rep.converged, "{pre:?}");
            assert!(rep.residual_norm <= 1e-10 * b.norm());
            let dense = dense_spd_solve(a.to_dense(), &b).unwrap();
            assert!((x - dense).amax() < 1e-6);
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let a = laplacian_path(300, 1e-4);
        let b = DVector::from_fn(300, |i, _| ((i * 13) % 17) as f64);
        let opts = SolverOptions {
            max_iter: Some(3),
            dense_fallback: 0,
            preconditioner: Preconditioner::None,
            ..SolverOptions::default()
        };
        let err = SpdSystem::new(&a, &opts)
            .unwrap()
            .solve(&b, None)
            .unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 3, .. }));
        let opts = SolverOptions {
            dense_fallback: 300,
            ..opts
        };
        let (x, rep) = SpdSystem::new(&a, &opts).unwrap().solve(&b, None).unwrap();
        assert!(rep.converged);
        assert!((a.mul_dvec(&x) - &b).norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a =
            SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 0.5), (1, 1, 1.0)]).unwrap();
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            spd_solve(&a, &b, 1e-10, 10),
            Err(Error::Asymmetric { .. })
        ));
    }

    #[test]
    fn indefinite_rejected() {
        let a = diag_matrix(&[1.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            spd_solve(&a, &b, 1e-10, 10),
            Err(Error::NotPositiveDefinite)
        ));
    }
}
